use super::{prepare, solver, SvrError, SvrParams};
use crate::stats;

/// `2^−5, 2^−3, …, 2^15`.
pub fn default_c_grid() -> Vec<f64> {
    (-5..=15).step_by(2).map(|e| 2f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_c: f64,
    /// (C, mean held-out RMSE in target units); failed cells carry +∞.
    pub cv_rmse: Vec<(f64, f64)>,
}

/// Picks C by k-fold CV over raw inputs `x` and targets `y`. Each fold fits
/// its own scaler and standardizer on the training part only. C values are
/// solved along one ascending path per fold.
pub fn grid_search_c(
    x: &[f64],
    y: &[f64],
    folds: &[Vec<usize>],
    grid: &[f64],
    base: &SvrParams,
) -> Result<GridResult, SvrError> {
    if grid.is_empty() {
        return Err(SvrError::Param("empty C grid".into()));
    }
    if x.len() != y.len() {
        return Err(SvrError::Data(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|a, b| grid[*a].total_cmp(&grid[*b]));

    // errs[g][f]: RMSE of grid value g on fold f.
    let mut errs = vec![vec![f64::INFINITY; folds.len()]; grid.len()];
    let mut in_test = vec![false; x.len()];
    for (f, test) in folds.iter().enumerate() {
        in_test.iter_mut().for_each(|v| *v = false);
        for &i in test {
            in_test[i] = true;
        }
        let train_idx: Vec<usize> = (0..x.len()).filter(|i| !in_test[*i]).collect();
        let tx: Vec<f64> = train_idx.iter().map(|&i| x[i]).collect();
        let ty: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
        let Ok((scaler, standardizer, set)) = prepare(&tx, &ty) else {
            continue;
        };
        let cs: Vec<f64> = order.iter().map(|&g| grid[g]).collect();
        for (&g, res) in order.iter().zip(solver::solve_path(&set, base, &cs)) {
            match res {
                Ok(sol) => {
                    let pred: Vec<f64> = test
                        .iter()
                        .map(|&i| standardizer.invert(sol.w * scaler.apply(x[i]) + sol.b))
                        .collect();
                    let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                    errs[g][f] = stats::rmse(&pred, &truth);
                }
                Err(SvrError::NoConvergence { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let cv_rmse: Vec<(f64, f64)> = grid
        .iter()
        .zip(&errs)
        .map(|(c, e)| {
            let score = if e.iter().all(|v| v.is_finite()) {
                stats::mean(e)
            } else {
                f64::INFINITY
            };
            (*c, score)
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &(c, score) in &cv_rmse {
        if !score.is_finite() {
            continue;
        }
        best = match best {
            Some((bc, bs)) if bs < score || (bs == score && bc <= c) => Some((bc, bs)),
            _ => Some((c, score)),
        };
    }
    let (best_c, _) = best.ok_or(SvrError::AllCellsFailed)?;
    Ok(GridResult { best_c, cv_rmse })
}
