//! Transition-time summaries and feature scaling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;
use crate::transitions::{RoomPair, TransitionRecord};

pub const FEATURE_HEADER: [&str; 6] = ["participant", "scope", "from", "to", "kind", "seconds"];
/// Records needed in a day before it yields a feature sample.
pub const MIN_DAILY_COUNT: usize = 3;
/// Records needed in a clinical window.
pub const MIN_WINDOW_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("degenerate feature: min == max == {0}")]
    Degenerate(f64),
    #[error("window length must be 15 or 30 days, got {0}")]
    BadWindow(u32),
    #[error("line {line}: invalid {field}: {message}")]
    Field {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    P10,
    P15,
    P20,
    Q1,
    Mean,
    Median,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::P10,
        FeatureKind::P15,
        FeatureKind::P20,
        FeatureKind::Q1,
        FeatureKind::Mean,
        FeatureKind::Median,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::P10 => "P10",
            FeatureKind::P15 => "P15",
            FeatureKind::P20 => "P20",
            FeatureKind::Q1 => "Q1",
            FeatureKind::Mean => "Mean",
            FeatureKind::Median => "Median",
        }
    }

    /// Percentile fraction for the quantile kinds; `None` for Mean.
    pub fn fraction(self) -> Option<f64> {
        match self {
            FeatureKind::P10 => Some(0.10),
            FeatureKind::P15 => Some(0.15),
            FeatureKind::P20 => Some(0.20),
            FeatureKind::Q1 => Some(0.25),
            FeatureKind::Median => Some(0.5),
            FeatureKind::Mean => None,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown feature kind `{s}` (expected P10, P15, P20, Q1, Mean, Median)"))
    }
}

/// Linear-interpolation quantile: with sorted `v` and h = (n − 1)·p,
/// returns v[⌊h⌋] + (h − ⌊h⌋)·(v[⌊h⌋+1] − v[⌊h⌋]).
pub fn percentile(values: &[f64], p: f64) -> Result<f64, FeatureError> {
    if values.is_empty() {
        return Err(FeatureError::Empty);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(FeatureError::BadFraction(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Value of one statistic over a set of durations.
pub fn summarize(durations: &[f64], kind: FeatureKind) -> Result<f64, FeatureError> {
    if durations.is_empty() {
        return Err(FeatureError::Empty);
    }
    match kind.fraction() {
        Some(p) => percentile(durations, p),
        None => Ok(stats::mean(durations)),
    }
}

/// A day or a clinic-centered window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Day(NaiveDate),
    Window { center: NaiveDate, half_width_days: u32 },
}

impl Scope {
    pub fn date(&self) -> NaiveDate {
        match self {
            Scope::Day(d) => *d,
            Scope::Window { center, .. } => *center,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Day(d) => write!(f, "{d}"),
            Scope::Window {
                center,
                half_width_days,
            } => write!(f, "{center}~{half_width_days}"),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_date = |d: &str| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| format!("scope date `{d}`: {e}"));
        match s.split_once('~') {
            None => Ok(Scope::Day(parse_date(s)?)),
            Some((d, w)) => Ok(Scope::Window {
                center: parse_date(d)?,
                half_width_days: w.parse().map_err(|e| format!("scope half-width `{w}`: {e}"))?,
            }),
        }
    }
}

/// Half-width in days for a clinical window length.
pub fn half_width_for(window_days: u32) -> Result<u32, FeatureError> {
    match window_days {
        15 => Ok(7),
        30 => Ok(15),
        other => Err(FeatureError::BadWindow(other)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub participant: String,
    pub scope: Scope,
    pub pair: RoomPair,
    pub kind: FeatureKind,
    /// Seconds.
    pub value: f64,
}

/// Computes one feature over the records of a single pair and scope, or
/// `None` when fewer than `min_count` records are present.
pub fn compute_feature(
    records: &[&TransitionRecord],
    participant: &str,
    pair: &RoomPair,
    scope: Scope,
    kind: FeatureKind,
    min_count: usize,
) -> Option<FeatureSample> {
    if records.len() < min_count.max(1) {
        return None;
    }
    let durations: Vec<f64> = records.iter().map(|r| r.duration).collect();
    summarize(&durations, kind).ok().map(|value| FeatureSample {
        participant: participant.to_string(),
        scope,
        pair: pair.clone(),
        kind,
        value,
    })
}

fn all_kinds(
    out: &mut Vec<FeatureSample>,
    recs: &[&TransitionRecord],
    participant: &str,
    pair: &RoomPair,
    scope: Scope,
    min_count: usize,
) {
    for kind in FeatureKind::ALL {
        out.extend(compute_feature(recs, participant, pair, scope, kind, min_count));
    }
}

/// All six kinds for every (participant, pair, day) with at least
/// `min_count` records. Output is sorted by participant, pair, day, kind.
pub fn daily_features(records: &[TransitionRecord], min_count: usize) -> Vec<FeatureSample> {
    let mut groups: BTreeMap<(&str, &RoomPair, NaiveDate), Vec<&TransitionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.participant.as_str(), &r.pair, r.date)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((p, pair, date), recs) in groups {
        all_kinds(&mut out, &recs, p, pair, Scope::Day(date), min_count);
    }
    out
}

/// Features over windows of ±`half_width_days` around each clinic date.
pub fn window_features(
    records: &[TransitionRecord],
    clinic_dates: &[(String, NaiveDate)],
    half_width_days: u32,
    min_count: usize,
) -> Vec<FeatureSample> {
    let mut by_pair: BTreeMap<(&str, &RoomPair), Vec<&TransitionRecord>> = BTreeMap::new();
    for r in records {
        by_pair.entry((r.participant.as_str(), &r.pair)).or_default().push(r);
    }
    let hw = Duration::days(i64::from(half_width_days));
    let mut out = Vec::new();
    for ((p, pair), recs) in &by_pair {
        for (cp, center) in clinic_dates {
            if cp != p {
                continue;
            }
            let (lo, hi) = (*center - hw, *center + hw);
            let inside: Vec<&TransitionRecord> = recs.iter().copied().filter(|r| r.date >= lo && r.date <= hi).collect();
            let scope = Scope::Window {
                center: *center,
                half_width_days,
            };
            all_kinds(&mut out, &inside, p, pair, scope, min_count);
        }
    }
    out.sort_by(|a, b| (&a.participant, &a.pair, a.scope, a.kind).cmp(&(&b.participant, &b.pair, b.scope, b.kind)));
    out
}

/// Min-max scaler onto [−1, +1], fit on training values only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self, FeatureError> {
        if values.is_empty() {
            return Err(FeatureError::Empty);
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Err(FeatureError::Degenerate(min));
        }
        Ok(Self { min, max })
    }

    /// Not clipped: values outside the training range map outside [−1, 1].
    pub fn apply(&self, value: f64) -> f64 {
        2.0 * (value - self.min) / (self.max - self.min) - 1.0
    }

    pub fn invert(&self, scaled: f64) -> f64 {
        (scaled + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}

pub fn write_feature_csv<W: Write>(samples: &[FeatureSample], out: W) -> Result<(), FeatureError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(FEATURE_HEADER)?;
    for s in samples {
        wtr.write_record([
            s.participant.clone(),
            s.scope.to_string(),
            s.pair.from.clone(),
            s.pair.to.clone(),
            s.kind.to_string(),
            s.value.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn parse_feature_csv<R: Read>(input: R) -> Result<Vec<FeatureSample>, FeatureError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    if !header.iter().eq(FEATURE_HEADER) {
        return Err(FeatureError::Field {
            line: 1,
            field: "header",
            message: format!("expected `{}`", FEATURE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |field: &'static str, message: String| FeatureError::Field { line, field, message };
        out.push(FeatureSample {
            participant: row[0].to_string(),
            scope: row[1].parse().map_err(|m| err("scope", m))?,
            pair: RoomPair::new(&row[2], &row[3]),
            kind: row[4].parse().map_err(|m| err("kind", m))?,
            value: row[5]
                .parse()
                .map_err(|e: std::num::ParseFloatError| err("seconds", e.to_string()))?,
        });
    }
    Ok(out)
}
