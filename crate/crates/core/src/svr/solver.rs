//! SMO solver for the linear ε-SVR dual with scalar inputs.
//!
//! The dual has 2ℓ variables β = (α, α*) with signs s = (+1…, −1…):
//!
//! ```text
//! min ½ βᵀQβ + pᵀβ   s.t.  Σ s_t β_t = 0,  0 ≤ β_t ≤ C
//! Q_tu = s_t s_u x_t x_u,   p_t = ε − s_t y_t
//! ```
//!
//! For the linear kernel the gradient collapses to
//! `G_t = s_t x_t w + ε − s_t y_t` with `w = Σ (α_i − α*_i) x_i`, so only the
//! scalar `w` is kept up to date. Each iteration takes the maximal violator
//! and the partner with the best second-order gain, then solves the
//! two-variable subproblem analytically.

use super::{SvrError, SvrParams, TrainingSet};

const TAU: f64 = 1e-12;

/// Raw dual solution in the training space.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub w: f64,
    pub b: f64,
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub iterations: usize,
    /// Final maximal KKT violation `max_{I_up} −s G − min_{I_low} −s G`.
    pub violation: f64,
}

struct State<'a> {
    x: &'a [f64],
    y: &'a [f64],
    eps: f64,
    c: f64,
    beta: Vec<f64>,
    w: f64,
    /// Points still scanned by the working-set selection.
    active: Vec<usize>,
}

struct Selection {
    i: usize,
    j: usize,
    m: f64,
    big_m: f64,
}

impl Selection {
    fn violation(&self) -> f64 {
        self.m - self.big_m
    }

    fn done(&self, tolerance: f64) -> bool {
        self.i == usize::MAX || self.j == usize::MAX || self.violation() < tolerance
    }
}

impl State<'_> {
    fn len(&self) -> usize {
        self.x.len()
    }

    #[inline]
    fn point(&self, t: usize) -> (f64, usize) {
        let l = self.len();
        if t < l {
            (1.0, t)
        } else {
            (-1.0, t - l)
        }
    }

    #[inline]
    fn grad(&self, t: usize) -> f64 {
        let (s, k) = self.point(t);
        s * self.x[k] * self.w + self.eps - s * self.y[k]
    }

    /// Working pair over the points `ks`, with the extremes
    /// `m = max_{I_up} −s G` and `M = min_{I_low} −s G`. With residual
    /// `r_k = y_k − w x_k`, `−s G` is `r − ε` for α_k and `r + ε` for α*_k.
    /// `i` attains `m`; `j` is the violating partner with the largest
    /// second-order decrease `(m + s G_j)² / (x_i − x_j)²`.
    fn select(&self, ks: impl Iterator<Item = usize> + Clone) -> Selection {
        let l = self.len();
        let (eps, c, w) = (self.eps, self.c, self.w);
        let (a, a_star) = self.beta.split_at(l);
        let mut sel = Selection {
            i: usize::MAX,
            j: usize::MAX,
            m: f64::NEG_INFINITY,
            big_m: f64::INFINITY,
        };
        for k in ks.clone() {
            let r = self.y[k] - self.x[k] * w;
            let (vp, vm) = (r - eps, r + eps);
            if a[k] < c && vp > sel.m {
                sel.m = vp;
                sel.i = k;
            }
            if a[k] > 0.0 && vp < sel.big_m {
                sel.big_m = vp;
            }
            if a_star[k] > 0.0 && vm > sel.m {
                sel.m = vm;
                sel.i = k + l;
            }
            if a_star[k] < c && vm < sel.big_m {
                sel.big_m = vm;
            }
        }
        if sel.i == usize::MAX {
            return sel;
        }
        let xi = self.x[self.point(sel.i).1];
        let mut best = f64::INFINITY;
        for k in ks {
            let r = self.y[k] - self.x[k] * w;
            let quad = (xi - self.x[k]).powi(2).max(TAU);
            for (t, v, low) in [(k, r - eps, a[k] > 0.0), (k + l, r + eps, a_star[k] < c)] {
                let gap = sel.m - v;
                if low && gap > 0.0 {
                    let gain = -gap * gap / quad;
                    if gain < best {
                        best = gain;
                        sel.j = t;
                    }
                }
            }
        }
        sel
    }

    /// Drops points whose two variables both sit at a bound on the side that
    /// cannot join a violating pair given the current `m` and `M`.
    fn shrink(&mut self, m: f64, big_m: f64) {
        let l = self.len();
        let (eps, c, w) = (self.eps, self.c, self.w);
        let (x, y, beta) = (self.x, self.y, &self.beta);
        self.active.retain(|&k| {
            let r = y[k] - x[k] * w;
            let (vp, vm) = (r - eps, r + eps);
            let (a, a_star) = (beta[k], beta[k + l]);
            let a_stuck = if a <= 0.0 {
                vp < big_m
            } else if a >= c {
                vp > m
            } else {
                false
            };
            let a_star_stuck = if a_star <= 0.0 {
                vm > m
            } else if a_star >= c {
                vm < big_m
            } else {
                false
            };
            !(a_stuck && a_star_stuck)
        });
    }

    fn update_pair(&mut self, i: usize, j: usize) {
        let (si, ki) = self.point(i);
        let (sj, kj) = self.point(j);
        let (xi, xj) = (self.x[ki], self.x[kj]);
        let qii = xi * xi;
        let qjj = xj * xj;
        let qij = si * sj * xi * xj;
        let gi = self.grad(i);
        let gj = self.grad(j);
        let c = self.c;
        let (old_i, old_j) = (self.beta[i], self.beta[j]);
        let (mut ai, mut aj) = (old_i, old_j);

        if si != sj {
            let mut quad = qii + qjj + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-gi - gj) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = qii + qjj - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (gi - gj) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }

        // Clipping arithmetic such as `c - diff` can land an ulp away from a
        // bound, which would leave the variable looking free.
        let snap = |v: f64| {
            let tol = 4.0 * f64::EPSILON * c;
            if v <= tol {
                0.0
            } else if c - v <= tol {
                c
            } else {
                v
            }
        };
        let (ai, aj) = (snap(ai), snap(aj));
        self.beta[i] = ai;
        self.beta[j] = aj;
        self.w += si * xi * (ai - old_i) + sj * xj * (aj - old_j);
    }

    fn recompute_w(&mut self) {
        let l = self.len();
        self.w = (0..l).map(|k| (self.beta[k] - self.beta[k + l]) * self.x[k]).sum();
    }

    /// Bias from free variables, else the midpoint of the feasible interval.
    fn bias(&self) -> f64 {
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        let mut sum_free = 0.0;
        let mut n_free = 0usize;
        for t in 0..2 * self.len() {
            let (s, _) = self.point(t);
            let yg = s * self.grad(t);
            if self.beta[t] >= self.c {
                if s < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if self.beta[t] <= 0.0 {
                if s > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                n_free += 1;
                sum_free += yg;
            }
        }
        let rho = if n_free > 0 {
            sum_free / n_free as f64
        } else if ub.is_finite() && lb.is_finite() {
            0.5 * (ub + lb)
        } else if ub.is_finite() {
            ub
        } else {
            lb
        };
        -rho
    }
}

/// Solves the dual. `warm` may carry (α, α*) from a solve with C' ≤ C on
/// the same data; it is ignored if infeasible for `params.c`.
pub fn solve(train: &TrainingSet, params: &SvrParams, warm: Option<(&[f64], &[f64])>) -> Result<DualSolution, SvrError> {
    params.validate()?;
    let l = train.len();
    let mut beta = vec![0.0; 2 * l];
    if let Some((a, a_star)) = warm {
        let feasible = a.len() == l
            && a_star.len() == l
            && a.iter().chain(a_star).all(|v| (0.0..=params.c).contains(v));
        if feasible {
            beta[..l].copy_from_slice(a);
            beta[l..].copy_from_slice(a_star);
        }
    }
    let mut st = State {
        x: &train.x,
        y: &train.y,
        eps: params.epsilon,
        c: params.c,
        beta,
        w: 0.0,
        active: (0..l).collect(),
    };
    st.recompute_w();

    // Shrinking is safe to undo at any time: gradients depend on w alone,
    // so unshrinking needs no reconstruction.
    let shrink_every = l.clamp(1, 1000);
    let mut iterations = 0;
    let violation;
    loop {
        let mut sel = st.select(st.active.iter().copied());
        if sel.done(params.tolerance) {
            if st.active.len() < l {
                st.recompute_w();
                st.active = (0..l).collect();
                sel = st.select(0..l);
            }
            if sel.done(params.tolerance) {
                violation = sel.violation();
                break;
            }
        }
        if iterations >= params.max_iter {
            let full = st.select(0..l);
            return Err(SvrError::NoConvergence {
                iterations,
                violation: full.violation(),
            });
        }
        st.update_pair(sel.i, sel.j);
        iterations += 1;
        if iterations % 4096 == 0 {
            st.recompute_w();
        }
        if iterations % shrink_every == 0 {
            let now = st.select(st.active.iter().copied());
            st.shrink(now.m, now.big_m);
        }
    }

    // α_i·α*_i = 0: removing the common part leaves w and Σ(α − α*) intact
    // and lowers the ε-term of the objective.
    for k in 0..l {
        let m = st.beta[k].min(st.beta[k + l]);
        if m > 0.0 {
            st.beta[k] -= m;
            st.beta[k + l] -= m;
        }
    }
    st.recompute_w();
    let b = st.bias();
    let (alpha, alpha_star) = st.beta.split_at(l);
    Ok(DualSolution {
        w: st.w,
        b,
        alpha: alpha.to_vec(),
        alpha_star: alpha_star.to_vec(),
        iterations,
        violation: violation.max(0.0),
    })
}

/// Largest penalty at which [`solve_continued`] starts its path.
pub const CONTINUATION_START: f64 = 1.0 / 32.0;

/// Solves for each C in `cs` (ascending) in turn. Each solve starts from
/// the previous solution scaled by `C_new / C_old`, which stays feasible and
/// tracks the bounded coefficients that grow in proportion to C. Without the
/// scaling, SMO needs a number of iterations roughly
/// proportional to C.
pub fn solve_path(train: &TrainingSet, params: &SvrParams, cs: &[f64]) -> Vec<Result<DualSolution, SvrError>> {
    let mut out = Vec::with_capacity(cs.len());
    let mut prev: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for &c in cs {
        let p = params.with_c(c);
        let warm = prev.as_ref().map(|(a, s, pc)| {
            let r = c / pc;
            (
                a.iter().map(|v| (v * r).min(c)).collect::<Vec<f64>>(),
                s.iter().map(|v| (v * r).min(c)).collect::<Vec<f64>>(),
            )
        });
        let res = solve(train, &p, warm.as_ref().map(|(a, s)| (a.as_slice(), s.as_slice())));
        if let Ok(sol) = &res {
            prev = Some((sol.alpha.clone(), sol.alpha_star.clone(), c));
        }
        out.push(res);
    }
    out
}

/// Solves at `params.c` via a path `C·4^−m, …, C/4, C` that starts at or
/// below [`CONTINUATION_START`].
pub fn solve_continued(train: &TrainingSet, params: &SvrParams) -> Result<DualSolution, SvrError> {
    params.validate()?;
    let mut cs = vec![params.c];
    while cs[cs.len() - 1] > CONTINUATION_START {
        let next = cs[cs.len() - 1] / 4.0;
        cs.push(next);
    }
    cs.reverse();
    solve_path(train, params, &cs).pop().expect("non-empty path")
}
