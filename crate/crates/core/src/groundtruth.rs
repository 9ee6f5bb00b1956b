//! Per-day ground-truth gait velocity from a ceiling sensor line.
//!
//! Each walk under the line gives one velocity estimate (least-squares slope
//! of position against time). Estimates for a participant form two clusters:
//! a noise cluster near zero from interrupted walks and the gait cluster.
//! A two-component 1-D Gaussian mixture separates them; estimates within two
//! standard deviations of the gait component are kept and averaged per day.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ingest::{DayStream, SensorKind};
use crate::stats;

pub const MIN_CLUSTER_POINTS: usize = 20;
pub const MIN_QQ_POINTS: usize = 10;
pub const DAILY_VELOCITY_HEADER: [&str; 5] = ["participant", "date", "mean_cm_s", "n", "sd_cm_s"];

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("walk has {0} firings, need at least 2")]
    TooFewFirings(usize),
    #[error("all firing timestamps identical; slope undefined")]
    ZeroTimeSpread,
    #[error("need at least {needed} estimates to cluster, got {got}")]
    TooFewToCluster { needed: usize, got: usize },
    #[error("degenerate mixture: {0}")]
    Degenerate(String),
    #[error("EM did not converge in {iterations} iterations (last relative change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("need at least {needed} points for Q-Q diagnostic, got {got}")]
    TooFewForQq { needed: usize, got: usize },
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("line geometry: {0}")]
    Geometry(String),
    #[error("line element index {index} not in geometry")]
    UnknownElement { index: u32 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Positions of the line elements, indexed by element number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineGeometry {
    pub positions_m: Vec<f64>,
}

impl LineGeometry {
    pub fn new(positions_m: Vec<f64>) -> Result<Self, GroundTruthError> {
        if positions_m.len() < 2 {
            return Err(GroundTruthError::Geometry("need at least 2 elements".into()));
        }
        if positions_m.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GroundTruthError::Geometry("positions must be finite and ≥ 0".into()));
        }
        if positions_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GroundTruthError::Geometry("positions must strictly increase with index".into()));
        }
        Ok(Self { positions_m })
    }

    pub fn position(&self, index: u32) -> Option<f64> {
        self.positions_m.get(index as usize).copied()
    }
}

/// Parses `index,position_m`; indices must be exactly 0..n in any order.
pub fn parse_line_geometry_csv<R: Read>(input: R) -> Result<LineGeometry, GroundTruthError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if !header.iter().eq(["index", "position_m"]) {
        return Err(GroundTruthError::Geometry("header must be `index,position_m`".into()));
    }
    let mut by_index = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let index: usize = row[0]
            .parse()
            .map_err(|e| GroundTruthError::Geometry(format!("index `{}`: {e}", &row[0])))?;
        let pos: f64 = row[1]
            .parse()
            .map_err(|e| GroundTruthError::Geometry(format!("position `{}`: {e}", &row[1])))?;
        if by_index.insert(index, pos).is_some() {
            return Err(GroundTruthError::Geometry(format!("duplicate index {index}")));
        }
    }
    if by_index.keys().enumerate().any(|(i, k)| i != *k) {
        return Err(GroundTruthError::Geometry("indices must be contiguous from 0".into()));
    }
    LineGeometry::new(by_index.into_values().collect())
}

pub fn write_line_geometry_csv<W: std::io::Write>(geometry: &LineGeometry, out: W) -> Result<(), GroundTruthError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["index", "position_m"])?;
    for (i, p) in geometry.positions_m.iter().enumerate() {
        wtr.write_record([i.to_string(), p.to_string()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One pass under the sensor line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineWalk {
    pub participant: String,
    pub date: NaiveDate,
    /// (firing time, element position in meters), time-ordered.
    pub firings: Vec<(DateTime<Utc>, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub participant: String,
    pub date: NaiveDate,
    pub velocity: f64,
}

/// Groups a day's line firings into walks: maximal runs in which each
/// firing is the next element (±1, one direction) after the previous one,
/// no more than `max_gap_s` later. Runs of a single firing are dropped.
pub fn detect_walks(day: &DayStream, geometry: &LineGeometry, max_gap_s: f64) -> Result<Vec<LineWalk>, GroundTruthError> {
    let mut walks = Vec::new();
    let mut current: Vec<(DateTime<Utc>, f64)> = Vec::new();
    let mut last: Option<(u32, DateTime<Utc>)> = None;
    let mut direction = 0i64;
    let flush = |current: &mut Vec<(DateTime<Utc>, f64)>, walks: &mut Vec<LineWalk>| {
        if current.len() >= 2 {
            walks.push(LineWalk {
                participant: day.participant.clone(),
                date: day.date,
                firings: std::mem::take(current),
            });
        } else {
            current.clear();
        }
    };
    for e in &day.events {
        let SensorKind::LineElement { index, .. } = e.kind else { continue };
        let pos = geometry
            .position(index)
            .ok_or(GroundTruthError::UnknownElement { index })?;
        let continues = match last {
            Some((prev_idx, prev_t)) => {
                let step = i64::from(index) - i64::from(prev_idx);
                let gap = (e.timestamp - prev_t).num_milliseconds() as f64 / 1000.0;
                step.abs() == 1 && (direction == 0 || step == direction) && gap <= max_gap_s
            }
            None => false,
        };
        if continues {
            direction = i64::from(index) - i64::from(last.unwrap().0);
        } else {
            flush(&mut current, &mut walks);
            direction = 0;
        }
        current.push((e.timestamp, pos));
        last = Some((index, e.timestamp));
    }
    flush(&mut current, &mut walks);
    Ok(walks)
}

/// Absolute least-squares slope of position on time, in cm/s.
pub fn estimate_line_velocity(walk: &LineWalk) -> Result<VelocityEstimate, GroundTruthError> {
    let n = walk.firings.len();
    if n < 2 {
        return Err(GroundTruthError::TooFewFirings(n));
    }
    let t0 = walk.firings[0].0;
    let ts: Vec<f64> = walk
        .firings
        .iter()
        .map(|(t, _)| (*t - t0).num_milliseconds() as f64 / 1000.0)
        .collect();
    let ps: Vec<f64> = walk.firings.iter().map(|(_, p)| *p).collect();
    let fit = stats::ols(&ts, &ps).ok_or(GroundTruthError::ZeroTimeSpread)?;
    Ok(VelocityEstimate {
        participant: walk.participant.clone(),
        date: walk.date,
        velocity: 100.0 * fit.slope.abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: f64,
    pub sd: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterLabel {
    Noise,
    Gait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSplit {
    pub noise: Component,
    pub gait: Component,
    /// One label per input estimate, in input order.
    pub assignments: Vec<ClusterLabel>,
    /// Mixture log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub sd_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
            sd_floor: 1e-3,
        }
    }
}

fn log_normal_pdf(x: f64, c: &Component) -> f64 {
    let z = (x - c.mean) / c.sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - c.sd.ln() - 0.5 * z * z
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// k-means++ seeding for two centers on sorted 1-D data.
fn seed_centers(sorted: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, f64), GroundTruthError> {
    let first = sorted[rng.random_range(0..sorted.len())];
    let d2: Vec<f64> = sorted.iter().map(|x| (x - first).powi(2)).collect();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return Err(GroundTruthError::Degenerate("all estimates identical".into()));
    }
    let mut target = rng.random::<f64>() * total;
    let mut second = sorted[sorted.len() - 1];
    for (x, d) in sorted.iter().zip(&d2) {
        if target < *d {
            second = *x;
            break;
        }
        target -= d;
    }
    Ok((first, second))
}

fn moments(values: &[f64], sd_floor: f64) -> (f64, f64) {
    let m = stats::mean(values);
    (m, stats::population_sd(values).max(sd_floor))
}

/// Fits a two-component Gaussian mixture by EM and labels each estimate by
/// maximum responsibility; the larger-mean component is `gait`.
pub fn split_clusters(estimates: &[VelocityEstimate], seed: u64) -> Result<ClusterSplit, GroundTruthError> {
    split_clusters_with(estimates, seed, &EmConfig::default())
}

pub fn split_clusters_with(
    estimates: &[VelocityEstimate],
    seed: u64,
    cfg: &EmConfig,
) -> Result<ClusterSplit, GroundTruthError> {
    let values: Vec<f64> = estimates.iter().map(|e| e.velocity).collect();
    let (noise, gait, log_likelihood) = fit_mixture(&values, seed, cfg)?;
    let assignments = values
        .iter()
        .map(|&x| {
            let ln = noise.weight.ln() + log_normal_pdf(x, &noise);
            let lg = gait.weight.ln() + log_normal_pdf(x, &gait);
            if lg >= ln {
                ClusterLabel::Gait
            } else {
                ClusterLabel::Noise
            }
        })
        .collect();
    Ok(ClusterSplit {
        noise,
        gait,
        assignments,
        log_likelihood,
    })
}

/// Mixture fit on raw values. Works on a sorted copy so the result does not
/// depend on input order.
pub fn fit_mixture(values: &[f64], seed: u64, cfg: &EmConfig) -> Result<(Component, Component, Vec<f64>), GroundTruthError> {
    if values.len() < MIN_CLUSTER_POINTS {
        return Err(GroundTruthError::TooFewToCluster {
            needed: MIN_CLUSTER_POINTS,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2) = seed_centers(&sorted, &mut rng)?;
    let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
    let mid = 0.5 * (lo + hi);
    let split = sorted.partition_point(|x| *x <= mid);
    if split == 0 || split == sorted.len() {
        return Err(GroundTruthError::Degenerate("initial split left a component empty".into()));
    }
    let (m0, s0) = moments(&sorted[..split], cfg.sd_floor);
    let (m1, s1) = moments(&sorted[split..], cfg.sd_floor);
    let mut comps = [
        Component {
            mean: m0,
            sd: s0,
            weight: split as f64 / n,
        },
        Component {
            mean: m1,
            sd: s1,
            weight: 1.0 - split as f64 / n,
        },
    ];

    let mut trace = Vec::new();
    let mut resp = vec![0.0; sorted.len()];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut last_change = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        // E-step: responsibility of component 1.
        let mut ll = 0.0;
        for (x, r) in sorted.iter().zip(resp.iter_mut()) {
            let a = comps[0].weight.ln() + log_normal_pdf(*x, &comps[0]);
            let b = comps[1].weight.ln() + log_normal_pdf(*x, &comps[1]);
            let lse = log_sum_exp(a, b);
            ll += lse;
            *r = (b - lse).exp();
        }
        if prev_ll.is_finite() {
            last_change = (ll - prev_ll).abs() / prev_ll.abs().max(f64::MIN_POSITIVE);
        }
        trace.push(ll);
        if last_change < cfg.rel_tol {
            break;
        }
        prev_ll = ll;

        // M-step.
        let n1: f64 = resp.iter().sum();
        let n0 = n - n1;
        if n0 <= 0.0 || n1 <= 0.0 {
            return Err(GroundTruthError::Degenerate("a component lost all mass".into()));
        }
        let mu0 = sorted.iter().zip(&resp).map(|(x, r)| (1.0 - r) * x).sum::<f64>() / n0;
        let mu1 = sorted.iter().zip(&resp).map(|(x, r)| r * x).sum::<f64>() / n1;
        let v0 = sorted.iter().zip(&resp).map(|(x, r)| (1.0 - r) * (x - mu0).powi(2)).sum::<f64>() / n0;
        let v1 = sorted.iter().zip(&resp).map(|(x, r)| r * (x - mu1).powi(2)).sum::<f64>() / n1;
        comps = [
            Component {
                mean: mu0,
                sd: v0.sqrt().max(cfg.sd_floor),
                weight: n0 / n,
            },
            Component {
                mean: mu1,
                sd: v1.sqrt().max(cfg.sd_floor),
                weight: n1 / n,
            },
        ];
    }
    if last_change >= cfg.rel_tol {
        return Err(GroundTruthError::NoConvergence {
            iterations: cfg.max_iter,
            last_change,
        });
    }
    for c in &comps {
        if !(c.weight > 0.0 && c.weight < 1.0) || !c.mean.is_finite() {
            return Err(GroundTruthError::Degenerate(format!("component {c:?}")));
        }
    }
    let (noise, gait) = if comps[0].mean < comps[1].mean {
        (comps[0], comps[1])
    } else {
        (comps[1], comps[0])
    };
    if gait.mean <= noise.mean {
        return Err(GroundTruthError::Degenerate("components share a mean".into()));
    }
    Ok((noise, gait, trace))
}

/// Keeps estimates with |v − gait.mean| ≤ 2·gait.sd (inclusive).
pub fn filter_two_sd(split: &ClusterSplit, estimates: &[VelocityEstimate]) -> Vec<VelocityEstimate> {
    let bound = 2.0 * split.gait.sd;
    estimates
        .iter()
        .filter(|e| (e.velocity - split.gait.mean).abs() <= bound)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyVelocity {
    pub participant: String,
    pub date: NaiveDate,
    pub mean_velocity: f64,
    pub n: usize,
    pub sd: f64,
}

pub fn daily_mean(retained: &[VelocityEstimate]) -> Vec<DailyVelocity> {
    let mut groups: BTreeMap<(&str, NaiveDate), Vec<f64>> = BTreeMap::new();
    for e in retained {
        groups.entry((e.participant.as_str(), e.date)).or_default().push(e.velocity);
    }
    groups
        .into_iter()
        .map(|((p, date), vs)| DailyVelocity {
            participant: p.to_string(),
            date,
            mean_velocity: stats::mean(&vs),
            n: vs.len(),
            sd: stats::sample_sd(&vs),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqDiagnostic {
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    /// (standard-normal quantile, sorted sample value) pairs.
    pub points: Vec<(f64, f64)>,
}

/// Normal Q-Q diagnostic with plotting positions (i − 0.5)/n.
pub fn qq_diagnostic(values: &[f64]) -> Result<QqDiagnostic, GroundTruthError> {
    if values.len() < MIN_QQ_POINTS {
        return Err(GroundTruthError::TooFewForQq {
            needed: MIN_QQ_POINTS,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(GroundTruthError::ZeroVariance);
    }
    let n = sorted.len() as f64;
    let std_normal = Normal::standard();
    let theo: Vec<f64> = (1..=sorted.len())
        .map(|i| std_normal.inverse_cdf((i as f64 - 0.5) / n))
        .collect();
    let fit = stats::ols(&theo, &sorted).ok_or(GroundTruthError::ZeroVariance)?;
    Ok(QqDiagnostic {
        r_squared: fit.r_squared,
        slope: fit.slope,
        intercept: fit.intercept,
        points: theo.into_iter().zip(sorted).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// Largest gap between consecutive element firings within one walk.
    pub max_gap_s: f64,
    pub em: EmConfig,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            max_gap_s: 180.0,
            em: EmConfig::default(),
        }
    }
}

/// Per-participant ground-truth outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantGroundTruth {
    pub participant: String,
    pub n_estimates: usize,
    pub split: Option<ClusterSplit>,
    pub qq: Option<QqDiagnostic>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthOutput {
    pub daily: Vec<DailyVelocity>,
    pub participants: Vec<ParticipantGroundTruth>,
}

/// Walk detection → velocity estimation → cluster split → 2-SD filter →
/// daily means, per participant. Participants that cannot be clustered are
/// reported as skipped and contribute no targets.
pub fn ground_truth(
    days: &[DayStream],
    geometry: &LineGeometry,
    seed: u64,
    cfg: &GroundTruthConfig,
) -> Result<GroundTruthOutput, GroundTruthError> {
    let mut estimates: BTreeMap<&str, Vec<VelocityEstimate>> = BTreeMap::new();
    for d in days {
        let entry = estimates.entry(d.participant.as_str()).or_default();
        for walk in detect_walks(d, geometry, cfg.max_gap_s)? {
            match estimate_line_velocity(&walk) {
                Ok(v) => entry.push(v),
                Err(GroundTruthError::ZeroTimeSpread) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let mut out = GroundTruthOutput::default();
    for (participant, ests) in estimates {
        let mut report = ParticipantGroundTruth {
            participant: participant.to_string(),
            n_estimates: ests.len(),
            split: None,
            qq: None,
            skipped: None,
        };
        match split_clusters_with(&ests, seed, &cfg.em) {
            Ok(split) => {
                let retained = filter_two_sd(&split, &ests);
                let vs: Vec<f64> = retained.iter().map(|e| e.velocity).collect();
                report.qq = qq_diagnostic(&vs).ok();
                out.daily.extend(daily_mean(&retained));
                report.split = Some(split);
            }
            Err(e) => report.skipped = Some(e.to_string()),
        }
        out.participants.push(report);
    }
    Ok(out)
}

pub fn write_daily_velocity_csv<W: std::io::Write>(daily: &[DailyVelocity], out: W) -> Result<(), GroundTruthError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(DAILY_VELOCITY_HEADER)?;
    for d in daily {
        wtr.write_record([
            d.participant.clone(),
            d.date.to_string(),
            d.mean_velocity.to_string(),
            d.n.to_string(),
            d.sd.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn parse_daily_velocity_csv<R: Read>(input: R) -> Result<Vec<DailyVelocity>, GroundTruthError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if !header.iter().eq(DAILY_VELOCITY_HEADER) {
        return Err(GroundTruthError::Geometry(format!(
            "daily velocity header must be `{}`",
            DAILY_VELOCITY_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let bad = |f: &str| GroundTruthError::Geometry(format!("bad {f} in daily velocity row {:?}", row.position().map(|p| p.line())));
        out.push(DailyVelocity {
            participant: row[0].to_string(),
            date: NaiveDate::parse_from_str(&row[1], "%Y-%m-%d").map_err(|_| bad("date"))?,
            mean_velocity: row[2].parse().map_err(|_| bad("mean_cm_s"))?,
            n: row[3].parse().map_err(|_| bad("n"))?,
            sd: row[4].parse().map_err(|_| bad("sd_cm_s"))?,
        });
    }
    Ok(out)
}

pub fn write_qq_csv<W: std::io::Write>(participants: &[ParticipantGroundTruth], out: W) -> Result<(), GroundTruthError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["participant", "normal_quantile", "velocity_cm_s", "r_squared"])?;
    for p in participants {
        if let Some(qq) = &p.qq {
            for (q, v) in &qq.points {
                wtr.write_record([p.participant.clone(), q.to_string(), v.to_string(), qq.r_squared.to_string()])?;
            }
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SensorEvent;
    use chrono::Duration;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2010, 3, 1).unwrap()
    }

    fn walk(points: &[(f64, f64)]) -> LineWalk {
        let t0 = crate::ingest::parse_timestamp("2010-03-01T08:00:00.000Z").unwrap();
        LineWalk {
            participant: "P1".into(),
            date: date(),
            firings: points
                .iter()
                .map(|(t, p)| (t0 + Duration::milliseconds((t * 1000.0).round() as i64), *p))
                .collect(),
        }
    }

    fn est(v: f64) -> VelocityEstimate {
        VelocityEstimate {
            participant: "P1".into(),
            date: date(),
            velocity: v,
        }
    }

    #[test]
    fn exact_lines() {
        let v = estimate_line_velocity(&walk(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])).unwrap();
        assert!((v.velocity - 100.0).abs() < 1e-9);
        let v = estimate_line_velocity(&walk(&[(0.0, 0.0), (2.0, 1.0), (4.0, 2.0), (6.0, 3.0)])).unwrap();
        assert!((v.velocity - 50.0).abs() < 1e-9);
        let rev = estimate_line_velocity(&walk(&[(0.0, 3.0), (2.0, 2.0), (4.0, 1.0), (6.0, 0.0)])).unwrap();
        assert!((rev.velocity - 50.0).abs() < 1e-9);
    }

    #[test]
    fn jittered_walk_matches_normal_equations() {
        let pts = [(0.0, 0.0), (0.613, 0.6), (1.187, 1.2), (1.842, 1.8)];
        let v = estimate_line_velocity(&walk(&pts)).unwrap();
        // Normal equations [n Σt; Σt Σt²][b; m] = [Σp; Σtp], solved by Cramer's rule.
        let n = pts.len() as f64;
        let st: f64 = pts.iter().map(|p| p.0).sum();
        let stt: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sp: f64 = pts.iter().map(|p| p.1).sum();
        let stp: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * stp - st * sp) / (n * stt - st * st);
        assert!((v.velocity - 100.0 * slope).abs() <= 1e-9 * 100.0 * slope);
    }

    #[test]
    fn identical_times_error() {
        assert!(matches!(
            estimate_line_velocity(&walk(&[(1.0, 0.0), (1.0, 1.0)])),
            Err(GroundTruthError::ZeroTimeSpread)
        ));
        assert!(matches!(
            estimate_line_velocity(&walk(&[(1.0, 0.0)])),
            Err(GroundTruthError::TooFewFirings(1))
        ));
    }

    fn mixture(n: usize, seed: u64, noise: (f64, f64), gait: (f64, f64)) -> (Vec<VelocityEstimate>, Vec<ClusterLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dn = NormalDist::new(noise.0, noise.1).unwrap();
        let dg = NormalDist::new(gait.0, gait.1).unwrap();
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    (est(dn.sample(&mut rng)), ClusterLabel::Noise)
                } else {
                    (est(dg.sample(&mut rng)), ClusterLabel::Gait)
                }
            })
            .unzip()
    }

    #[test]
    fn recovers_two_clusters() {
        let (ests, truth) = mixture(2000, 1, (0.0, 5.0), (80.0, 10.0));
        let split = split_clusters(&ests, 7).unwrap();
        assert!((split.gait.mean - 80.0).abs() < 2.0);
        assert!(split.noise.mean.abs() < 2.0);
        let wrong = split.assignments.iter().zip(&truth).filter(|(a, b)| a != b).count();
        assert!((wrong as f64) / 2000.0 < 0.01);
        assert!((split.gait.weight + split.noise.weight - 1.0).abs() < 1e-12);
        for w in split.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn larger_mean_is_gait_regardless_of_seed() {
        let (ests, _) = mixture(400, 2, (0.0, 5.0), (120.0, 10.0));
        for seed in 0..10 {
            let split = split_clusters(&ests, seed).unwrap();
            assert!((split.gait.mean - 120.0).abs() < 3.0, "seed {seed}");
        }
    }

    #[test]
    fn order_invariance() {
        let (ests, _) = mixture(300, 4, (2.0, 4.0), (70.0, 12.0));
        let mut rev = ests.clone();
        rev.reverse();
        let a = split_clusters(&ests, 3).unwrap();
        let mut b = split_clusters(&rev, 3).unwrap();
        b.assignments.reverse();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.gait, b.gait);
    }

    #[test]
    fn degenerate_inputs() {
        let same: Vec<_> = (0..50).map(|_| est(42.0)).collect();
        assert!(matches!(split_clusters(&same, 1), Err(GroundTruthError::Degenerate(_))));
        let few: Vec<_> = (0..19).map(|i| est(i as f64)).collect();
        assert!(matches!(
            split_clusters(&few, 1),
            Err(GroundTruthError::TooFewToCluster { needed: 20, got: 19 })
        ));
    }

    fn fixed_split(mean: f64, sd: f64, n: usize) -> ClusterSplit {
        ClusterSplit {
            noise: Component { mean: 0.0, sd: 5.0, weight: 0.5 },
            gait: Component { mean, sd, weight: 0.5 },
            assignments: vec![ClusterLabel::Gait; n],
            log_likelihood: vec![],
        }
    }

    #[test]
    fn two_sd_boundary_is_inclusive() {
        let ests = vec![est(100.0), est(100.01), est(60.0), est(59.99), est(0.5), est(-1.0)];
        let kept = filter_two_sd(&fixed_split(80.0, 10.0, ests.len()), &ests);
        let vs: Vec<f64> = kept.iter().map(|e| e.velocity).collect();
        assert_eq!(vs, vec![100.0, 60.0]);
    }

    #[test]
    fn two_sd_matches_naive_loop_and_refit_shrinks() {
        let (ests, _) = mixture(2000, 9, (0.0, 5.0), (80.0, 10.0));
        let split = split_clusters(&ests, 1).unwrap();
        let kept = filter_two_sd(&split, &ests);
        let mut naive = Vec::new();
        for e in &ests {
            let d = e.velocity - split.gait.mean;
            if -2.0 * split.gait.sd <= d && d <= 2.0 * split.gait.sd {
                naive.push(e.clone());
            }
        }
        assert_eq!(kept, naive);
        if let Ok(again) = split_clusters(&kept, 1) {
            assert!(filter_two_sd(&again, &kept).len() <= kept.len());
        }
    }

    #[test]
    fn daily_means() {
        let d = daily_mean(&[est(55.0)]);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].mean_velocity, d[0].n, d[0].sd), (55.0, 1, 0.0));
        let d = daily_mean(&[est(70.0), est(80.0), est(90.0)]);
        assert_eq!((d[0].mean_velocity, d[0].n), (80.0, 3));
    }

    #[test]
    fn daily_means_match_group_by() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ests: Vec<_> = (0..600)
            .map(|_| VelocityEstimate {
                participant: "P1".into(),
                date: date() + Duration::days(rng.random_range(0..30)),
                velocity: rng.random_range(50.0..110.0),
            })
            .collect();
        let daily = daily_mean(&ests);
        for d in &daily {
            let (mut s, mut c) = (0.0, 0usize);
            for e in &ests {
                if e.date == d.date {
                    s += e.velocity;
                    c += 1;
                }
            }
            assert_eq!(d.n, c);
            assert!((d.mean_velocity - s / c as f64).abs() < 1e-9);
        }
        assert_eq!(daily.iter().map(|d| d.n).sum::<usize>(), 600);
    }

    #[test]
    fn qq_normal_vs_heavy_tail() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nd = NormalDist::new(80.0, 10.0).unwrap();
            let normal: Vec<f64> = (0..1000).map(|_| nd.sample(&mut rng)).collect();
            // Scale mixture: 10% of points with 6× the spread.
            let heavy: Vec<f64> = (0..1000)
                .map(|_| {
                    let z: f64 = NormalDist::new(0.0, 1.0).unwrap().sample(&mut rng);
                    80.0 + z * if rng.random::<f64>() < 0.1 { 60.0 } else { 10.0 }
                })
                .collect();
            let a = qq_diagnostic(&normal).unwrap();
            let b = qq_diagnostic(&heavy).unwrap();
            assert!(a.r_squared >= 0.99);
            assert!(a.r_squared > b.r_squared);
            assert!((a.slope - 10.0).abs() < 1.0);
        }
        assert!(matches!(qq_diagnostic(&[5.0; 20]), Err(GroundTruthError::ZeroVariance)));
        assert!(matches!(qq_diagnostic(&[1.0; 9]), Err(GroundTruthError::TooFewForQq { .. })));
    }

    fn line_event(ms: i64, index: u32) -> SensorEvent {
        SensorEvent {
            participant: "P1".into(),
            timestamp: crate::ingest::parse_timestamp("2010-03-01T08:00:00.000Z").unwrap() + Duration::milliseconds(ms),
            sensor: format!("L{index}"),
            kind: SensorKind::LineElement {
                index,
                position_m: 0.6 * index as f64,
            },
        }
    }

    #[test]
    fn walk_detection() {
        let geom = LineGeometry::new(vec![0.0, 0.6, 1.2, 1.8]).unwrap();
        let events = vec![
            line_event(0, 0),
            line_event(600, 1),
            line_event(1200, 2),
            line_event(1800, 3),
            // Reverse pass starting again at the far end: new walk.
            line_event(60_000, 3),
            line_event(61_000, 2),
            // Long pause inside the walk still counts.
            line_event(150_000, 1),
            // Lone firing after a big gap: dropped.
            line_event(900_000, 0),
        ];
        let day = DayStream {
            participant: "P1".into(),
            date: date(),
            events,
        };
        let walks = detect_walks(&day, &geom, 180.0).unwrap();
        assert_eq!(walks.len(), 2);
        assert_eq!(walks[0].firings.len(), 4);
        assert_eq!(walks[1].firings.len(), 3);
        let v0 = estimate_line_velocity(&walks[0]).unwrap().velocity;
        assert!((v0 - 100.0).abs() < 1e-9);
        assert!(estimate_line_velocity(&walks[1]).unwrap().velocity < 2.0);
    }

    #[test]
    fn geometry_validation() {
        assert!(LineGeometry::new(vec![0.0, 0.6, 0.6]).is_err());
        assert!(LineGeometry::new(vec![0.0]).is_err());
        let g = parse_line_geometry_csv("index,position_m\n1,0.6\n0,0\n2,1.2\n".as_bytes()).unwrap();
        assert_eq!(g.positions_m, vec![0.0, 0.6, 1.2]);
        assert!(parse_line_geometry_csv("index,position_m\n0,0\n2,1.2\n".as_bytes()).is_err());
    }
}
