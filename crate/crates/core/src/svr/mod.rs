//! Linear ε-insensitive support vector regression on one scalar feature.
//!
//! Inputs are min-max scaled to [−1, 1] and targets standardized on the
//! training data before the dual is solved; [`predict`] undoes both, so
//! callers work in raw seconds and cm/s throughout.

mod grid;
pub mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, Scaler};

pub use grid::{default_c_grid, grid_search_c, GridResult};
pub use solver::DualSolution;

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid training set: {0}")]
    Data(String),
    #[error("all inputs identical; slope undefined")]
    DegenerateInput,
    #[error("SMO stopped after {iterations} iterations with KKT violation {violation:e}")]
    NoConvergence { iterations: usize, violation: f64 },
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    /// Penalty weight on tube violations.
    pub c: f64,
    /// Tube half-width, in standardized target units.
    pub epsilon: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            tolerance: 1e-6,
            max_iter: 100_000,
        }
    }
}

impl SvrParams {
    pub fn validate(&self) -> Result<(), SvrError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvrError::Param(format!("C must be positive, got {}", self.c)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(SvrError::Param(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SvrError::Param(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }

    pub fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }
}

/// Paired scalar inputs and targets, already in solver space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TrainingSet {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, SvrError> {
        if x.len() != y.len() {
            return Err(SvrError::Data(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(SvrError::Data(format!("need at least 2 points, got {}", x.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(SvrError::Data("non-finite value".into()));
        }
        if x.iter().all(|v| *v == x[0]) {
            return Err(SvrError::DegenerateInput);
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `|r|_ε`: zero inside the closed tube, `|r| − ε` outside.
pub fn epsilon_loss(residual: f64, epsilon: f64) -> f64 {
    let a = residual.abs();
    if a <= epsilon {
        0.0
    } else {
        a - epsilon
    }
}

/// `½w² + C Σ |y_i − (w x_i + b)|_ε`.
pub fn primal_objective(w: f64, b: f64, train: &TrainingSet, params: &SvrParams) -> f64 {
    let loss: f64 = train
        .x
        .iter()
        .zip(&train.y)
        .map(|(x, y)| epsilon_loss(y - (w * x + b), params.epsilon))
        .sum();
    0.5 * w * w + params.c * loss
}

/// Dual objective in maximization form:
/// `−½w² − ε Σ(α_i + α*_i) + Σ y_i (α_i − α*_i)`.
pub fn dual_objective(alpha: &[f64], alpha_star: &[f64], train: &TrainingSet, epsilon: f64) -> f64 {
    let mut w = 0.0;
    let mut lin = 0.0;
    for k in 0..train.len() {
        let d = alpha[k] - alpha_star[k];
        w += d * train.x[k];
        lin += -epsilon * (alpha[k] + alpha_star[k]) + train.y[k] * d;
    }
    -0.5 * w * w + lin
}

/// Largest violation of the pointwise optimality conditions at (w, b):
/// α_i > 0 ⇒ r_i ≥ ε, α_i < C ⇒ r_i ≤ ε, α*_i > 0 ⇒ r_i ≤ −ε,
/// α*_i < C ⇒ r_i ≥ −ε, with r_i = y_i − (w x_i + b).
pub fn kkt_violation(sol: &DualSolution, train: &TrainingSet, params: &SvrParams) -> f64 {
    let eps = params.epsilon;
    let mut worst = 0.0f64;
    for k in 0..train.len() {
        let r = train.y[k] - (sol.w * train.x[k] + sol.b);
        let (a, a_star) = (sol.alpha[k], sol.alpha_star[k]);
        if a > 0.0 {
            worst = worst.max(eps - r);
        }
        if a < params.c {
            worst = worst.max(r - eps);
        }
        if a_star > 0.0 {
            worst = worst.max(r + eps);
        }
        if a_star < params.c {
            worst = worst.max(-eps - r);
        }
    }
    worst
}

/// Target centering and scaling fit on training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    /// Constant targets get sd = 1 so the model reduces to predicting the mean.
    pub fn fit(values: &[f64]) -> Self {
        let mean = crate::stats::mean(values);
        let sd = crate::stats::population_sd(values);
        let sd = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
        Self { mean, sd }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// A trained model; `w` and `b` live in scaled-input, standardized-target
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub w: f64,
    pub b: f64,
    /// (α_i, α*_i) per training point.
    pub alphas: Vec<(f64, f64)>,
    pub scaler: Scaler,
    pub params: SvrParams,
    pub target_standardizer: Standardizer,
}

/// Fit-time transforms plus the solver-space training set.
pub(crate) fn prepare(x_raw: &[f64], y: &[f64]) -> Result<(Scaler, Standardizer, TrainingSet), SvrError> {
    if x_raw.len() != y.len() {
        return Err(SvrError::Data(format!("{} inputs but {} targets", x_raw.len(), y.len())));
    }
    let scaler = Scaler::fit(x_raw)?;
    let standardizer = Standardizer::fit(y);
    let set = TrainingSet::new(
        x_raw.iter().map(|v| scaler.apply(*v)).collect(),
        y.iter().map(|v| standardizer.apply(*v)).collect(),
    )?;
    Ok((scaler, standardizer, set))
}

pub(crate) fn assemble(sol: DualSolution, scaler: Scaler, standardizer: Standardizer, params: SvrParams) -> SvrModel {
    SvrModel {
        w: sol.w,
        b: sol.b,
        alphas: sol.alpha.into_iter().zip(sol.alpha_star).collect(),
        scaler,
        params,
        target_standardizer: standardizer,
    }
}

/// Fits scaler and standardizer on the given data and solves the dual.
pub fn train(x_raw: &[f64], y: &[f64], params: &SvrParams) -> Result<SvrModel, SvrError> {
    let (scaler, standardizer, set) = prepare(x_raw, y)?;
    let sol = solver::solve_continued(&set, params)?;
    Ok(assemble(sol, scaler, standardizer, *params))
}

/// Velocity in cm/s for a raw feature value in seconds.
pub fn predict(model: &SvrModel, x_raw: f64) -> f64 {
    let z = model.w * model.scaler.apply(x_raw) + model.b;
    model.target_standardizer.invert(z)
}

impl SvrModel {
    /// Primal objective on a set in the model's internal space.
    pub fn primal_objective(&self, train: &TrainingSet) -> f64 {
        primal_objective(self.w, self.b, train, &self.params)
    }

    pub fn dual_objective(&self, train: &TrainingSet) -> f64 {
        let (a, s): (Vec<f64>, Vec<f64>) = self.alphas.iter().copied().unzip();
        dual_objective(&a, &s, train, self.params.epsilon)
    }
}
