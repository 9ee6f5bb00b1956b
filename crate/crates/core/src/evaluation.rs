//! Cross-validated prediction error per (participant, pair, feature kind),
//! best-pair tables, population aggregation and predicted-vs-true fits.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{half_width_for, FeatureError, FeatureKind, FeatureSample, Scope};
use crate::groundtruth::DailyVelocity;
use crate::ingest::ClinicVisit;
use crate::stats::{self, LineFit};
use crate::svr::{self, default_c_grid, grid_search_c, SvrError, SvrParams};
use crate::transitions::RoomPair;

pub const DEFAULT_FOLDS: usize = 5;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot split {n} samples into {k} folds")]
    TooFewForFolds { n: usize, k: usize },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("no matched samples")]
    NoMatchedSamples,
    #[error("need at least {needed} pairs for a line fit, got {got}")]
    TooFewForFit { needed: usize, got: usize },
    #[error("true values have zero variance")]
    ZeroVariance,
    #[error(transparent)]
    Svr(#[from] SvrError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Shuffles `0..n` with a seeded ChaCha8 stream and deals it into `k`
/// contiguous folds; the first `n % k` folds hold one extra index.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    if n < k {
        return Err(EvalError::TooFewForFolds { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// A velocity target for one participant on one date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub participant: String,
    pub date: NaiveDate,
    pub velocity: f64,
}

impl From<&DailyVelocity> for Target {
    fn from(d: &DailyVelocity) -> Self {
        Self {
            participant: d.participant.clone(),
            date: d.date,
            velocity: d.mean_velocity,
        }
    }
}

impl From<&ClinicVisit> for Target {
    fn from(c: &ClinicVisit) -> Self {
        Self {
            participant: c.participant.clone(),
            date: c.date,
            velocity: c.velocity_cm_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Daily,
    Clinical { window_days: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub folds: usize,
    pub seed: u64,
    pub params: SvrParams,
    pub c_grid: Vec<f64>,
}

impl EvalConfig {
    pub fn new(mode: EvalMode, seed: u64) -> Self {
        Self {
            mode,
            folds: DEFAULT_FOLDS,
            seed,
            params: SvrParams::default(),
            c_grid: default_c_grid(),
        }
    }
}

/// Cross-validated error of one (participant, pair, kind) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub participant: String,
    pub pair: RoomPair,
    pub kind: FeatureKind,
    pub rmse_mean: f64,
    /// Sample sd of the per-fold RMSEs.
    pub rmse_sd: f64,
    pub n_samples: usize,
    pub fold_rmse: Vec<f64>,
    /// C chosen by the inner grid search, per outer fold.
    pub fold_c: Vec<f64>,
    /// Leave-one-out was used because fewer than k samples matched.
    pub leave_one_out: bool,
    /// Out-of-fold (date, true, predicted) triples.
    #[serde(skip)]
    pub predictions: Vec<(NaiveDate, f64, f64)>,
}

/// Indices an outer fold used for fitting versus testing.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldTrace {
    pub test: Vec<usize>,
    /// Indices handed to scaler, standardizer and grid search.
    pub fitted_on: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub fold_rmse: Vec<f64>,
    pub fold_c: Vec<f64>,
    /// Out-of-fold prediction per input index.
    pub predictions: Vec<f64>,
    pub leave_one_out: bool,
}

/// Nested k-fold CV over raw inputs `x` (seconds) and targets `y` (cm/s).
/// Each outer fold runs its own inner grid search on the training part. With
/// `allow_loo`, fewer than k samples fall back to leave-one-out.
pub fn cross_validate_xy(
    x: &[f64],
    y: &[f64],
    cfg: &EvalConfig,
    allow_loo: bool,
    mut trace: Option<&mut Vec<FoldTrace>>,
) -> Result<CvOutcome, EvalError> {
    let n = x.len();
    let (folds, loo) = if n < cfg.folds && allow_loo && n >= 3 {
        ((0..n).map(|i| vec![i]).collect(), true)
    } else {
        (kfold_split(n, cfg.folds, cfg.seed)?, false)
    };
    let mut predictions = vec![f64::NAN; n];
    let mut fold_rmse = Vec::with_capacity(folds.len());
    let mut fold_c = Vec::with_capacity(folds.len());
    let mut in_test = vec![false; n];
    for (f, test) in folds.iter().enumerate() {
        in_test.iter_mut().for_each(|v| *v = false);
        for &i in test {
            in_test[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|i| !in_test[*i]).collect();
        if let Some(t) = trace.as_deref_mut() {
            t.push(FoldTrace {
                test: test.clone(),
                fitted_on: train.clone(),
            });
        }
        let tx: Vec<f64> = train.iter().map(|&i| x[i]).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let inner_k = cfg.folds.min(tx.len());
        let inner = kfold_split(tx.len(), inner_k, cfg.seed.wrapping_add(1 + f as u64))?;
        let best = grid_search_c(&tx, &ty, &inner, &cfg.c_grid, &cfg.params)?;
        let (c, model) = fit_ranked(&tx, &ty, &best.cv_rmse, &cfg.params)?;
        let pred: Vec<f64> = test.iter().map(|&i| svr::predict(&model, x[i])).collect();
        let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        for (&i, p) in test.iter().zip(&pred) {
            predictions[i] = *p;
        }
        fold_rmse.push(stats::rmse(&pred, &truth));
        fold_c.push(c);
    }
    Ok(CvOutcome {
        fold_rmse,
        fold_c,
        predictions,
        leave_one_out: loo,
    })
}

/// Fits at the best-scoring C, moving down the ranking (score, then smaller
/// C) when the solver does not converge at a value.
fn fit_ranked(x: &[f64], y: &[f64], scores: &[(f64, f64)], base: &SvrParams) -> Result<(f64, svr::SvrModel), EvalError> {
    let mut ranked: Vec<(f64, f64)> = scores.iter().copied().filter(|(_, s)| s.is_finite()).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let mut last = SvrError::AllCellsFailed;
    for (c, _) in ranked {
        match svr::train(x, y, &base.with_c(c)) {
            Ok(model) => return Ok((c, model)),
            Err(e @ SvrError::NoConvergence { .. }) => last = e,
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.into())
}

/// A cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub participant: String,
    pub pair: RoomPair,
    pub kind: FeatureKind,
    pub n_samples: usize,
    pub reason: String,
}

/// Matched (date, x, y) rows per cell plus join bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Joined {
    pub cells: BTreeMap<(String, RoomPair, FeatureKind), Vec<(NaiveDate, f64, f64)>>,
    pub unmatched_features: usize,
    pub unmatched_targets: usize,
}

/// Joins feature samples to targets on (participant, date). In clinical mode
/// only windows of the configured width are used; in daily mode only days.
pub fn join(features: &[FeatureSample], targets: &[Target], mode: EvalMode) -> Result<Joined, EvalError> {
    let want_hw = match mode {
        EvalMode::Daily => None,
        EvalMode::Clinical { window_days } => Some(half_width_for(window_days)?),
    };
    let tmap: HashMap<(&str, NaiveDate), f64> = targets
        .iter()
        .map(|t| ((t.participant.as_str(), t.date), t.velocity))
        .collect();
    let mut out = Joined::default();
    let mut used: std::collections::HashSet<(&str, NaiveDate)> = Default::default();
    for s in features {
        let date = match (s.scope, want_hw) {
            (Scope::Day(d), None) => d,
            (Scope::Window { center, half_width_days }, Some(hw)) if half_width_days == hw => center,
            _ => continue,
        };
        match tmap.get(&(s.participant.as_str(), date)) {
            Some(&v) => {
                used.insert((s.participant.as_str(), date));
                out.cells
                    .entry((s.participant.clone(), s.pair.clone(), s.kind))
                    .or_default()
                    .push((date, s.value, v));
            }
            None => out.unmatched_features += 1,
        }
    }
    out.unmatched_targets = tmap.keys().filter(|k| !used.contains(*k)).count();
    for rows in out.cells.values_mut() {
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }
    Ok(out)
}

/// Runs CV on every joined cell. Cells are processed in key order, so the
/// output is sorted by (participant, pair, kind).
pub fn evaluate_cells(joined: &Joined, cfg: &EvalConfig) -> (Vec<EvalCell>, Vec<SkippedCell>) {
    let allow_loo = matches!(cfg.mode, EvalMode::Clinical { .. });
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for ((participant, pair, kind), rows) in &joined.cells {
        let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let skip = |reason: String| SkippedCell {
            participant: participant.clone(),
            pair: pair.clone(),
            kind: *kind,
            n_samples: rows.len(),
            reason,
        };
        if x.len() < 3 && allow_loo {
            skipped.push(skip(format!("{} matched samples; cannot validate", x.len())));
            continue;
        }
        match cross_validate_xy(&x, &y, cfg, allow_loo, None) {
            Ok(cv) => {
                cells.push(EvalCell {
                    participant: participant.clone(),
                    pair: pair.clone(),
                    kind: *kind,
                    rmse_mean: stats::mean(&cv.fold_rmse),
                    rmse_sd: stats::sample_sd(&cv.fold_rmse),
                    n_samples: x.len(),
                    fold_rmse: cv.fold_rmse,
                    fold_c: cv.fold_c,
                    leave_one_out: cv.leave_one_out,
                    predictions: rows.iter().zip(&cv.predictions).map(|(r, p)| (r.0, r.2, *p)).collect(),
                });
            }
            Err(e) => skipped.push(skip(e.to_string())),
        }
    }
    (cells, skipped)
}

/// Per kind, the cell with the lowest `rmse_mean`; ties go to the pair whose
/// label sorts first.
pub fn best_pair_table(cells: &[EvalCell]) -> BTreeMap<FeatureKind, &EvalCell> {
    let mut best: BTreeMap<FeatureKind, &EvalCell> = BTreeMap::new();
    for c in cells {
        let replace = match best.get(&c.kind) {
            None => true,
            Some(b) => {
                c.rmse_mean < b.rmse_mean || (c.rmse_mean == b.rmse_mean && c.pair.to_string() < b.pair.to_string())
            }
        };
        if replace {
            best.insert(c.kind, c);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub participant: String,
    pub kind: FeatureKind,
    pub pair: RoomPair,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
}

impl From<&EvalCell> for BestCell {
    fn from(c: &EvalCell) -> Self {
        Self {
            participant: c.participant.clone(),
            kind: c.kind,
            pair: c.pair.clone(),
            rmse_mean: c.rmse_mean,
            rmse_sd: c.rmse_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: FeatureKind,
    /// Mean over participants of their best-pair RMSE for this kind.
    pub population_rmse: f64,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationReport {
    /// Sorted by kind.
    pub kinds: Vec<KindSummary>,
    /// Kinds ordered by ascending population RMSE.
    pub ordering: Vec<FeatureKind>,
    /// Every participant's best pair for every kind.
    pub table: Vec<BestCell>,
    /// Each participant's single best (pair, kind).
    pub best: Vec<BestCell>,
}

impl PopulationReport {
    pub fn population_rmse(&self, kind: FeatureKind) -> Option<f64> {
        self.kinds.iter().find(|k| k.kind == kind).map(|k| k.population_rmse)
    }

    /// Lowest population RMSE over kinds.
    pub fn best_kind(&self) -> Option<&KindSummary> {
        self.ordering
            .first()
            .and_then(|k| self.kinds.iter().find(|s| s.kind == *k))
    }
}

pub fn population_aggregate(cells: &[EvalCell]) -> PopulationReport {
    let mut by_participant: BTreeMap<&str, Vec<EvalCell>> = BTreeMap::new();
    for c in cells {
        by_participant.entry(c.participant.as_str()).or_default().push(c.clone());
    }
    let mut per_kind: BTreeMap<FeatureKind, Vec<f64>> = BTreeMap::new();
    let mut table = Vec::new();
    let mut best = Vec::new();
    for cs in by_participant.values() {
        let t = best_pair_table(cs);
        let mut overall: Option<&EvalCell> = None;
        for (kind, c) in &t {
            per_kind.entry(*kind).or_default().push(c.rmse_mean);
            table.push(BestCell::from(*c));
            if overall.is_none_or(|o| c.rmse_mean < o.rmse_mean) {
                overall = Some(c);
            }
        }
        best.extend(overall.map(BestCell::from));
    }
    let kinds: Vec<KindSummary> = per_kind
        .into_iter()
        .map(|(kind, v)| KindSummary {
            kind,
            population_rmse: stats::mean(&v),
            participants: v.len(),
        })
        .collect();
    let mut ordering: Vec<&KindSummary> = kinds.iter().collect();
    ordering.sort_by(|a, b| a.population_rmse.total_cmp(&b.population_rmse).then(a.kind.cmp(&b.kind)));
    PopulationReport {
        ordering: ordering.into_iter().map(|k| k.kind).collect(),
        kinds,
        table,
        best,
    }
}

/// OLS of predicted on true.
pub fn predicted_vs_true(predicted: &[f64], truth: &[f64]) -> Result<LineFit, EvalError> {
    if predicted.len() != truth.len() || predicted.len() < 3 {
        return Err(EvalError::TooFewForFit {
            needed: 3,
            got: predicted.len().min(truth.len()),
        });
    }
    stats::ols(truth, predicted).ok_or(EvalError::ZeroVariance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub participant: String,
    pub date: NaiveDate,
    pub truth: f64,
    pub predicted: f64,
}

/// Out-of-fold predictions of each participant's best cell for the kind
/// with the lowest population RMSE, with the line fit over all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedVsTrue {
    pub kind: FeatureKind,
    pub fit: Option<LineFit>,
    pub points: Vec<ScatterPoint>,
}

pub fn scatter_for_kind(cells: &[EvalCell], population: &PopulationReport, kind: FeatureKind) -> PredictedVsTrue {
    let mut points = Vec::new();
    for b in population.table.iter().filter(|b| b.kind == kind) {
        let cell = cells
            .iter()
            .find(|c| c.participant == b.participant && c.kind == kind && c.pair == b.pair);
        if let Some(c) = cell {
            points.extend(c.predictions.iter().map(|(d, t, p)| ScatterPoint {
                participant: c.participant.clone(),
                date: *d,
                truth: *t,
                predicted: *p,
            }));
        }
    }
    let truth: Vec<f64> = points.iter().map(|p| p.truth).collect();
    let pred: Vec<f64> = points.iter().map(|p| p.predicted).collect();
    PredictedVsTrue {
        kind,
        fit: predicted_vs_true(&pred, &truth).ok(),
        points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub matched_samples: usize,
    pub unmatched_features: usize,
    pub unmatched_targets: usize,
    pub cells: Vec<EvalCell>,
    pub skipped: Vec<SkippedCell>,
    pub population: PopulationReport,
    pub predicted_vs_true: Option<PredictedVsTrue>,
}

/// Join, per-cell CV, aggregation and the predicted-vs-true scatter.
pub fn evaluate(features: &[FeatureSample], targets: &[Target], cfg: &EvalConfig) -> Result<EvaluationReport, EvalError> {
    if cfg.folds < 2 {
        return Err(EvalError::BadFoldCount(cfg.folds));
    }
    let joined = join(features, targets, cfg.mode)?;
    let matched: usize = joined.cells.values().map(Vec::len).sum();
    if matched == 0 {
        return Err(EvalError::NoMatchedSamples);
    }
    let (cells, skipped) = evaluate_cells(&joined, cfg);
    let population = population_aggregate(&cells);
    let pvt = population
        .best_kind()
        .map(|k| scatter_for_kind(&cells, &population, k.kind));
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        matched_samples: matched,
        unmatched_features: joined.unmatched_features,
        unmatched_targets: joined.unmatched_targets,
        cells,
        skipped,
        population,
        predicted_vs_true: pvt,
    })
}

/// `kind,population_rmse,participants` rows, one per kind.
pub fn write_kind_error_csv<W: std::io::Write>(report: &PopulationReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "population_rmse", "participants"])?;
    for k in &report.kinds {
        w.write_record([k.kind.as_str().to_string(), k.population_rmse.to_string(), k.participants.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `participant,date,true_cm_s,predicted_cm_s` rows.
pub fn write_scatter_csv<W: std::io::Write>(pvt: Option<&PredictedVsTrue>, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["participant", "date", "true_cm_s", "predicted_cm_s"])?;
    for p in pvt.into_iter().flat_map(|v| &v.points) {
        w.write_record([p.participant.clone(), p.date.to_string(), p.truth.to_string(), p.predicted.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_falls_back_down_the_ranking() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 50.0 + 10.0 * (v * 1.3).sin() + 0.2 * v).collect();
        let base = SvrParams {
            max_iter: 40,
            ..SvrParams::default()
        };
        assert!(svr::train(&x, &y, &base.with_c(1024.0)).is_err());
        let scores = [(0.03125, 0.5), (1024.0, 0.1), (4.0, f64::INFINITY)];
        let (c, _) = fit_ranked(&x, &y, &scores, &base).unwrap();
        assert_eq!(c, 0.03125);
        let none = [(1024.0, 0.1)];
        assert!(matches!(
            fit_ranked(&x, &y, &none, &base),
            Err(EvalError::Svr(SvrError::NoConvergence { .. }))
        ));
    }
    use proptest::prelude::*;

    fn cell(participant: &str, from: &str, to: &str, kind: FeatureKind, rmse: f64) -> EvalCell {
        EvalCell {
            participant: participant.into(),
            pair: RoomPair::new(from, to),
            kind,
            rmse_mean: rmse,
            rmse_sd: 0.0,
            n_samples: 10,
            fold_rmse: vec![rmse; 5],
            fold_c: vec![1.0; 5],
            leave_one_out: false,
            predictions: Vec::new(),
        }
    }

    #[test]
    fn kfold_examples() {
        let f = kfold_split(5, 5, 1).unwrap();
        assert!(f.iter().all(|v| v.len() == 1));
        let f = kfold_split(103, 5, 9).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![20, 20, 21, 21, 21]);
        assert!(matches!(kfold_split(3, 5, 0), Err(EvalError::TooFewForFolds { .. })));
        assert_eq!(kfold_split(50, 5, 4).unwrap(), kfold_split(50, 5, 4).unwrap());
        assert_ne!(kfold_split(50, 5, 4).unwrap(), kfold_split(50, 5, 5).unwrap());
    }

    #[test]
    fn kfold_partition_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.random_range(5..400);
            let k = rng.random_range(2..=5.min(n));
            let folds = kfold_split(n, k, rng.random()).unwrap();
            let mut seen = vec![0u32; n];
            for f in &folds {
                for &i in f {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|c| *c == 1));
            let lens: Vec<usize> = folds.iter().map(Vec::len).collect();
            assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn constant_targets_zero_error() {
        let x: Vec<f64> = (0..30).map(|i| 3.0 + (i as f64 * 0.37).sin()).collect();
        let y = vec![72.0; 30];
        let cfg = EvalConfig::new(EvalMode::Daily, 3);
        let cv = cross_validate_xy(&x, &y, &cfg, false, None).unwrap();
        assert!(stats::mean(&cv.fold_rmse) < 1e-9);
    }

    #[test]
    fn folds_never_fit_on_test_indices() {
        let x: Vec<f64> = (0..23).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 100.0 - 3.0 * v).collect();
        let cfg = EvalConfig::new(EvalMode::Daily, 11);
        let mut trace = Vec::new();
        cross_validate_xy(&x, &y, &cfg, false, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), 5);
        let mut tested = vec![0; 23];
        for t in &trace {
            for i in &t.test {
                assert!(!t.fitted_on.contains(i));
                tested[*i] += 1;
            }
            assert_eq!(t.test.len() + t.fitted_on.len(), 23);
        }
        assert!(tested.iter().all(|c| *c == 1));
    }

    #[test]
    fn loo_fallback_for_few_samples() {
        let x = vec![4.0, 4.5, 5.0, 5.5];
        let y = vec![100.0, 90.0, 80.0, 72.0];
        let mut cfg = EvalConfig::new(EvalMode::Clinical { window_days: 15 }, 1);
        cfg.c_grid = vec![1.0, 64.0];
        let cv = cross_validate_xy(&x, &y, &cfg, true, None).unwrap();
        assert!(cv.leave_one_out);
        assert_eq!(cv.fold_rmse.len(), 4);
        assert!(cross_validate_xy(&x, &y, &cfg, false, None).is_err());
    }

    #[test]
    fn one_assessment_is_skipped() {
        let d = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        let feats = vec![FeatureSample {
            participant: "p".into(),
            scope: Scope::Window {
                center: d,
                half_width_days: 7,
            },
            pair: RoomPair::new("a", "b"),
            kind: FeatureKind::P20,
            value: 4.0,
        }];
        let targets = vec![Target {
            participant: "p".into(),
            date: d,
            velocity: 90.0,
        }];
        let cfg = EvalConfig::new(EvalMode::Clinical { window_days: 15 }, 1);
        let r = evaluate(&feats, &targets, &cfg).unwrap();
        assert!(r.cells.is_empty());
        assert_eq!(r.skipped.len(), 1);
        assert!(r.skipped[0].reason.contains("cannot validate"));
    }

    #[test]
    fn join_counts_unmatched() {
        let d = |i| NaiveDate::from_ymd_opt(2020, 1, i).unwrap();
        let f = |day: u32, p: &str| FeatureSample {
            participant: p.into(),
            scope: Scope::Day(d(day)),
            pair: RoomPair::new("a", "b"),
            kind: FeatureKind::Mean,
            value: day as f64,
        };
        let t = |day: u32| Target {
            participant: "p".into(),
            date: d(day),
            velocity: 50.0 + day as f64,
        };
        let feats = vec![f(1, "p"), f(2, "p"), f(3, "q"), f(4, "p")];
        let targets = vec![t(1), t(2), t(5)];
        let j = join(&feats, &targets, EvalMode::Daily).unwrap();
        assert_eq!(j.unmatched_features, 2);
        assert_eq!(j.unmatched_targets, 1);
        let rows = &j.cells[&("p".to_string(), RoomPair::new("a", "b"), FeatureKind::Mean)];
        assert_eq!(rows, &vec![(d(1), 1.0, 51.0), (d(2), 2.0, 52.0)]);
        assert!(matches!(evaluate(&[], &targets, &EvalConfig::new(EvalMode::Daily, 0)), Err(EvalError::NoMatchedSamples)));
    }

    #[test]
    fn best_pair_single_and_table_rows() {
        let cells = vec![
            cell("p", "closet", "kitchen", FeatureKind::P10, 4.0),
            cell("p", "closet", "kitchen", FeatureKind::P20, 4.1),
        ];
        let t = best_pair_table(&cells);
        assert!(t.values().all(|c| c.pair == RoomPair::new("closet", "kitchen")));

        // Table-shaped fixture: P15 picks the closet → kitchen pair at 3.6.
        let mut fixture = vec![
            cell("p", "Walk-in closet", "kitchen", FeatureKind::P15, 3.6),
            cell("p", "Bathroom", "Living", FeatureKind::P15, 4.2),
            cell("p", "Kitchen", "Bedroom", FeatureKind::P15, 3.9),
        ];
        fixture[0].rmse_sd = 1.0;
        let t = best_pair_table(&fixture);
        let row = t[&FeatureKind::P15];
        assert_eq!(row.pair.to_string(), "Walk-in closet to kitchen");
        assert_eq!((row.rmse_mean, row.rmse_sd), (3.6, 1.0));

        let tie = vec![
            cell("p", "z", "a", FeatureKind::Mean, 2.0),
            cell("p", "b", "c", FeatureKind::Mean, 2.0),
        ];
        assert_eq!(best_pair_table(&tie)[&FeatureKind::Mean].pair, RoomPair::new("b", "c"));
    }

    #[test]
    fn aggregate_two_participants_by_hand() {
        let cells = vec![
            cell("a", "x", "y", FeatureKind::P20, 3.0),
            cell("a", "y", "x", FeatureKind::P20, 5.0),
            cell("a", "x", "y", FeatureKind::Mean, 6.0),
            cell("b", "x", "y", FeatureKind::P20, 4.0),
            cell("b", "x", "y", FeatureKind::Mean, 2.0),
        ];
        let r = population_aggregate(&cells);
        assert_eq!(r.population_rmse(FeatureKind::P20), Some(3.5));
        assert_eq!(r.population_rmse(FeatureKind::Mean), Some(4.0));
        assert_eq!(r.ordering, vec![FeatureKind::P20, FeatureKind::Mean]);
        assert_eq!(r.best.len(), 2);
        assert_eq!((r.best[0].kind, r.best[0].rmse_mean), (FeatureKind::P20, 3.0));
        assert_eq!((r.best[1].kind, r.best[1].rmse_mean), (FeatureKind::Mean, 2.0));
    }

    #[test]
    fn single_participant_aggregate_equals_table() {
        let cells = vec![
            cell("a", "x", "y", FeatureKind::P20, 3.0),
            cell("a", "y", "x", FeatureKind::P20, 2.5),
            cell("a", "x", "y", FeatureKind::Q1, 7.0),
        ];
        let r = population_aggregate(&cells);
        let t = best_pair_table(&cells);
        for k in &r.kinds {
            assert_eq!(k.population_rmse, t[&k.kind].rmse_mean);
        }
    }

    #[test]
    fn pred_vs_true_identity_and_anticorrelated() {
        let t = [60.0, 70.0, 85.0, 90.0, 100.0];
        let f = predicted_vs_true(&t, &t).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.intercept.abs() < 1e-9 && (f.r_squared - 1.0).abs() < 1e-12);

        let p = [3.0, 1.0, 2.0, -1.0, -2.0];
        let f = predicted_vs_true(&p, &t).unwrap();
        // Closed-form Pearson correlation.
        let (mt, mp) = (stats::mean(&t), stats::mean(&p));
        let sxy: f64 = t.iter().zip(&p).map(|(a, b)| (a - mt) * (b - mp)).sum();
        let sxx: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
        let syy: f64 = p.iter().map(|b| (b - mp).powi(2)).sum();
        let r = sxy / (sxx * syy).sqrt();
        assert!(r < 0.0);
        assert!((f.r_squared - r * r).abs() < 1e-12);
        assert!(predicted_vs_true(&t[..2], &t[..2]).is_err());
    }

    proptest! {
        #[test]
        fn argmin_matches_scan_and_is_monotone_invariant(vals in prop::collection::vec(0.0f64..10.0, 1..30)) {
            let kinds = FeatureKind::ALL;
            let cells: Vec<EvalCell> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| cell("p", &format!("r{}", i % 7), &format!("s{}", i / 7), kinds[i % 6], *v))
                .collect();
            let t = best_pair_table(&cells);
            for kind in kinds {
                let mut scan: Option<&EvalCell> = None;
                for c in cells.iter().filter(|c| c.kind == kind) {
                    scan = match scan {
                        Some(s) if (s.rmse_mean, s.pair.to_string()) <= (c.rmse_mean, c.pair.to_string()) => Some(s),
                        _ => Some(c),
                    };
                }
                prop_assert_eq!(t.get(&kind).map(|c| &c.pair), scan.map(|c| &c.pair));
            }
            let transformed: Vec<EvalCell> = cells
                .iter()
                .map(|c| EvalCell { rmse_mean: (c.rmse_mean * 0.7).exp() + 3.0, ..c.clone() })
                .collect();
            let t2 = best_pair_table(&transformed);
            for kind in kinds {
                prop_assert_eq!(t.get(&kind).map(|c| &c.pair), t2.get(&kind).map(|c| &c.pair));
            }
        }

        #[test]
        fn rmse_zero_iff_equal(v in prop::collection::vec(-50.0f64..50.0, 1..20), bump in 0usize..20) {
            prop_assert_eq!(stats::rmse(&v, &v), 0.0);
            let mut w = v.clone();
            let i = bump % w.len();
            w[i] += 0.5;
            prop_assert!(stats::rmse(&w, &v) > 0.0);
        }
    }
}
