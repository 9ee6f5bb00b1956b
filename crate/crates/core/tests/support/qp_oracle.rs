//! Dense projected-gradient oracle for the ε-SVR dual, independent of the
//! SMO solver: explicit Q matrix, accelerated projected gradient with
//! adaptive restart, and an exact projection onto the box ∩ hyperplane.

pub struct OracleSolution {
    /// Dual objective in maximization form.
    pub dual: f64,
    pub w: f64,
    pub b: f64,
}

/// `argmin_{0 ≤ β ≤ c, sᵀβ = 0} ‖β − v‖` by locating the root of the
/// piecewise-linear, nonincreasing `g(λ) = Σ s_t clip(v_t − λ s_t, 0, c)`.
pub fn project(v: &[f64], s: &[f64], c: f64) -> Vec<f64> {
    let at = |lambda: f64| -> Vec<f64> { v.iter().zip(s).map(|(vi, si)| (vi - lambda * si).clamp(0.0, c)).collect() };
    let g = |lambda: f64| -> f64 { at(lambda).iter().zip(s).map(|(b, si)| b * si).sum() };
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * v.len());
    for (vi, si) in v.iter().zip(s) {
        breaks.push(si * vi);
        breaks.push(si * (vi - c));
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let values: Vec<f64> = breaks.iter().map(|l| g(*l)).collect();
    // g ≥ 0 left of the root and ≤ 0 right of it.
    for k in 0..breaks.len() {
        if values[k] == 0.0 {
            return at(breaks[k]);
        }
        if k + 1 < breaks.len() && values[k] > 0.0 && values[k + 1] < 0.0 {
            let t = values[k] / (values[k] - values[k + 1]);
            let lambda = breaks[k] + t * (breaks[k + 1] - breaks[k]);
            return at(lambda);
        }
    }
    // g is constant beyond the extreme breakpoints; feasibility (β = 0)
    // guarantees a root inside.
    if values[0] <= 0.0 {
        at(breaks[0])
    } else {
        at(breaks[breaks.len() - 1])
    }
}

fn objective(q: &[Vec<f64>], p: &[f64], beta: &[f64]) -> f64 {
    let n = beta.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += beta[i] * q[i][j] * beta[j];
        }
    }
    0.5 * quad + p.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
}

fn gradient(q: &[Vec<f64>], p: &[f64], beta: &[f64]) -> Vec<f64> {
    (0..beta.len())
        .map(|i| q[i].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + p[i])
        .collect()
}

/// Midpoint of `argmin_b Σ max(0, |r_k − b| − ε)`.
fn primal_bias(x: &[f64], y: &[f64], w: f64, eps: f64) -> f64 {
    let r: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - w * xi).collect();
    let h = |b: f64| -> f64 { r.iter().map(|ri| ((ri - b).abs() - eps).max(0.0)).sum() };
    let mut bps: Vec<f64> = r.iter().flat_map(|ri| [ri - eps, ri + eps]).collect();
    bps.sort_by(f64::total_cmp);
    let hv: Vec<f64> = bps.iter().map(|b| h(*b)).collect();
    let m = hv.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + m);
    let lo = bps.iter().zip(&hv).find(|(_, v)| **v <= m + tol).map(|(b, _)| *b).unwrap();
    let hi = bps.iter().zip(&hv).rev().find(|(_, v)| **v <= m + tol).map(|(b, _)| *b).unwrap();
    0.5 * (lo + hi)
}

/// Solves the dual for inputs `x`, targets `y`, penalty `c`, tube `eps`.
pub fn solve_dual(x: &[f64], y: &[f64], c: f64, eps: f64, max_iter: usize) -> OracleSolution {
    let l = x.len();
    let n = 2 * l;
    let s: Vec<f64> = (0..n).map(|t| if t < l { 1.0 } else { -1.0 }).collect();
    let xs: Vec<f64> = (0..n).map(|t| x[t % l]).collect();
    let ys: Vec<f64> = (0..n).map(|t| y[t % l]).collect();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| s[i] * s[j] * xs[i] * xs[j]).collect()).collect();
    let p: Vec<f64> = (0..n).map(|t| eps - s[t] * ys[t]).collect();
    // Q is PSD, so its trace bounds the largest eigenvalue.
    let lip = (0..n).map(|i| q[i][i]).sum::<f64>().max(1e-12);

    let mut beta = vec![0.0; n];
    let mut ext = beta.clone();
    let mut theta = 1.0f64;
    let mut best = objective(&q, &p, &beta);
    let mut stall = 0;
    for _ in 0..max_iter {
        let g = gradient(&q, &p, &ext);
        let v: Vec<f64> = ext.iter().zip(&g).map(|(e, gi)| e - gi / lip).collect();
        let next = project(&v, &s, c);
        let restart = ext
            .iter()
            .zip(&next)
            .zip(&beta)
            .map(|((e, nx), b)| (e - nx) * (nx - b))
            .sum::<f64>()
            > 0.0;
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = if restart { 0.0 } else { (theta - 1.0) / theta_next };
        ext = next.iter().zip(&beta).map(|(nx, b)| nx + momentum * (nx - b)).collect();
        theta = if restart { 1.0 } else { theta_next };
        beta = next;
        let f = objective(&q, &p, &beta);
        if f < best - 1e-15 * (1.0 + best.abs()) {
            best = f;
            stall = 0;
        } else {
            stall += 1;
            if stall > 2000 {
                break;
            }
        }
    }
    let w: f64 = (0..l).map(|k| (beta[k] - beta[k + l]) * x[k]).sum();
    OracleSolution {
        dual: -objective(&q, &p, &beta),
        b: primal_bias(x, y, w, eps),
        w,
    }
}
