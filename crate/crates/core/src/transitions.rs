//! Room-to-room transition times from area motion firings.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DayStream;

pub const TRANSITION_HEADER: [&str; 5] = ["participant", "date", "from", "to", "seconds"];

/// Durations above this are treated as dwell-dominated and removed.
pub const DEFAULT_DWELL_CAP_S: f64 = 60.0;
/// Pairs with this many or fewer observations are removed.
pub const DEFAULT_MIN_COUNT: usize = 50;

#[derive(Debug, Error)]
pub enum TransitionError {
    #[error("dwell cap must be positive, got {0}")]
    NonPositiveCap(f64),
    #[error("line {line}: invalid {field}: {message}")]
    Field {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Ordered room pair; `A→B` and `B→A` are distinct.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoomPair {
    pub from: String,
    pub to: String,
}

impl RoomPair {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.to.clone(), self.from.clone())
    }

    /// Parses the `from:to` form used on the command line.
    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once(':')?;
        (!a.is_empty() && !b.is_empty() && a != b).then(|| Self::new(a, b))
    }
}

impl fmt::Display for RoomPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} to {}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub participant: String,
    pub date: NaiveDate,
    pub pair: RoomPair,
    /// Seconds between the last origin firing and the first destination firing.
    pub duration: f64,
}

/// Emits one record per change of room between consecutive area firings.
/// Line and clinic events are skipped without breaking adjacency; equal
/// timestamps produce no record.
pub fn extract_transitions(day: &DayStream) -> Vec<TransitionRecord> {
    let mut out = Vec::new();
    let mut prev: Option<(&str, chrono::DateTime<chrono::Utc>)> = None;
    for e in &day.events {
        let Some(room) = e.room() else { continue };
        if let Some((prev_room, prev_t)) = prev {
            if prev_room != room {
                let ms = (e.timestamp - prev_t).num_milliseconds();
                if ms > 0 {
                    out.push(TransitionRecord {
                        participant: day.participant.clone(),
                        date: day.date,
                        pair: RoomPair::new(prev_room, room),
                        duration: ms as f64 / 1000.0,
                    });
                }
            }
        }
        prev = Some((room, e.timestamp));
    }
    out
}

/// Removes records longer than `cap` seconds.
pub fn censor_dwell(records: &[TransitionRecord], cap: f64) -> Result<Vec<TransitionRecord>, TransitionError> {
    if cap.is_nan() || cap <= 0.0 {
        return Err(TransitionError::NonPositiveCap(cap));
    }
    Ok(records.iter().filter(|r| r.duration <= cap).cloned().collect())
}

/// Observation count per ordered room pair.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoomPairCensus {
    pub counts: BTreeMap<RoomPair, usize>,
}

impl RoomPairCensus {
    pub fn count(&self, pair: &RoomPair) -> usize {
        self.counts.get(pair).copied().unwrap_or(0)
    }

    pub fn transposed(&self) -> Self {
        Self {
            counts: self.counts.iter().map(|(p, n)| (p.reversed(), *n)).collect(),
        }
    }
}

pub fn census(records: &[TransitionRecord]) -> RoomPairCensus {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.pair.clone()).or_insert(0) += 1;
    }
    RoomPairCensus { counts }
}

/// Keeps records whose pair was observed strictly more than `min_count` times.
pub fn filter_rare_pairs(records: &[TransitionRecord], census: &RoomPairCensus, min_count: usize) -> Vec<TransitionRecord> {
    records
        .iter()
        .filter(|r| census.count(&r.pair) > min_count)
        .cloned()
        .collect()
}

/// Extract → censor → census → filter for a set of day streams, with the
/// census and filter applied per participant.
pub fn process_days(days: &[DayStream], cap: f64, min_count: usize) -> Result<Vec<TransitionRecord>, TransitionError> {
    let mut by_participant: BTreeMap<&str, Vec<TransitionRecord>> = BTreeMap::new();
    for d in days {
        let recs = censor_dwell(&extract_transitions(d), cap)?;
        by_participant.entry(d.participant.as_str()).or_default().extend(recs);
    }
    let mut out = Vec::new();
    for recs in by_participant.into_values() {
        let c = census(&recs);
        out.extend(filter_rare_pairs(&recs, &c, min_count));
    }
    Ok(out)
}

pub fn write_transition_csv<W: Write>(records: &[TransitionRecord], out: W) -> Result<(), TransitionError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(TRANSITION_HEADER)?;
    for r in records {
        wtr.write_record([
            r.participant.clone(),
            r.date.to_string(),
            r.pair.from.clone(),
            r.pair.to.clone(),
            r.duration.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn parse_transition_csv<R: Read>(input: R) -> Result<Vec<TransitionRecord>, TransitionError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if !header.iter().eq(TRANSITION_HEADER) {
        return Err(TransitionError::Field {
            line: 1,
            field: "header",
            message: format!("expected `{}`", TRANSITION_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d").map_err(|e| TransitionError::Field {
            line,
            field: "date",
            message: e.to_string(),
        })?;
        let duration: f64 = row[4].parse().map_err(|e: std::num::ParseFloatError| TransitionError::Field {
            line,
            field: "seconds",
            message: e.to_string(),
        })?;
        if !(duration > 0.0 && duration.is_finite()) || row[2] == row[3] {
            return Err(TransitionError::Field {
                line,
                field: "seconds",
                message: "transition must join two rooms with positive duration".into(),
            });
        }
        out.push(TransitionRecord {
            participant: row[0].to_string(),
            date,
            pair: RoomPair::new(&row[2], &row[3]),
            duration,
        });
    }
    Ok(out)
}
