//! Labeled synthetic households.
//!
//! One resident walks a Markov chain over adjacent rooms during active hours.
//! Each area sensor fires on arrival, at random intervals while the resident
//! stays, and on departure. A contaminated move suppresses the departure
//! firing: the origin sensor last fired a dwell remainder before the resident
//! left, so the measured transition is remainder plus travel. Visits to the
//! line room produce one traversal of the sensor line at the day's true
//! velocity, and every 365th day carries a clinic probe.
//!
//! All times inside a day are integer milliseconds from local midnight.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groundtruth::{write_line_geometry_csv, LineGeometry};
use crate::ingest::{self, ClinicVisit, ExclusionCalendar, ExclusionReason, SensorEvent, SensorKind};
use crate::transitions::RoomPair;

pub const TRUTH_DAILY_HEADER: [&str; 3] = ["participant", "date", "velocity_cm_s"];
pub const TRUTH_RECORD_HEADER: [&str; 7] = ["participant", "date", "from", "to", "seconds", "travel_seconds", "contaminated"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Write { path: PathBuf, message: String },
}

fn cfg_err(field: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::Config {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomsConfig {
    pub labels: Vec<String>,
    /// Minimum seconds between two firings of one sensor.
    #[serde(default = "default_refractory")]
    pub refractory_s: f64,
    /// Room the resident wakes up in; the first label when absent.
    #[serde(default)]
    pub start_room: Option<String>,
}

fn default_refractory() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub meters: f64,
}

/// Undirected doors between rooms with walking distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyConfig {
    pub edges: Vec<Edge>,
}

/// Log-normal in log-seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwellConfig {
    /// Probability that a move's departure firing is suppressed.
    pub p_dwell: f64,
    /// Time from the origin's last firing to departure on contaminated moves.
    pub remainder: LogNormalParams,
    /// Shortest stay in any room, seconds.
    pub min_stay_s: f64,
    /// Stay length per room.
    pub rooms: BTreeMap<String, LogNormalParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub room: String,
    pub positions_m: Vec<f64>,
    /// Element firing times are offset by a uniform draw in ±jitter_s.
    pub jitter_s: f64,
    /// Fraction of traversals interrupted by a pause somewhere on the line.
    pub pause_fraction: f64,
    pub pause_min_s: f64,
    pub pause_max_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    /// Linear drift from `start_cm_s` on day 0 to `end_cm_s` on the last day.
    pub start_cm_s: f64,
    pub end_cm_s: f64,
    /// Optional `[day, cm/s]` knots; when present they replace the drift and
    /// v(t) is linear between knots and flat beyond the ends.
    #[serde(default)]
    pub knots: Vec<[f64; 2]>,
    /// σ of the multiplicative log-normal noise on each move's travel time.
    pub travel_noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub active_start_hour: u32,
    pub active_end_hour: u32,
    /// Poisson mean of room changes per day.
    pub transitions_per_day: f64,
    /// Mean extra gap between in-room firings beyond the refractory period.
    pub in_room_gap_s: f64,
    pub clinic_noise_sd: f64,
    /// Expected line-outage days per 365, listed in the exclusion file.
    pub outage_days_per_year: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdConfig {
    pub participant: String,
    pub start_date: NaiveDate,
    #[serde(default)]
    pub tz_offset_minutes: i32,
    #[serde(default)]
    pub seed: u64,
    pub rooms: RoomsConfig,
    pub adjacency: AdjacencyConfig,
    pub dwell: DwellConfig,
    pub line: LineConfig,
    pub velocity: VelocityConfig,
    pub schedule: ScheduleConfig,
}

impl Default for HouseholdConfig {
    /// Five rooms around a living-room hub, 100 → 60 cm/s drift,
    /// p_dwell = 0.3.
    fn default() -> Self {
        let labels = ["living", "kitchen", "bedroom", "bathroom", "closet"];
        let edge = |a: &str, b: &str, m: f64| Edge {
            from: a.into(),
            to: b.into(),
            meters: m,
        };
        let ln = |median: f64, sigma: f64| LogNormalParams {
            mu: median.ln(),
            sigma,
        };
        Self {
            participant: "h01".into(),
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            tz_offset_minutes: 0,
            seed: 0,
            rooms: RoomsConfig {
                labels: labels.iter().map(|s| s.to_string()).collect(),
                refractory_s: 6.0,
                start_room: Some("bedroom".into()),
            },
            adjacency: AdjacencyConfig {
                edges: vec![
                    edge("living", "kitchen", 4.0),
                    edge("living", "bedroom", 5.0),
                    edge("living", "bathroom", 4.5),
                    edge("bedroom", "bathroom", 3.0),
                    edge("bedroom", "closet", 2.5),
                    edge("kitchen", "closet", 3.5),
                ],
            },
            dwell: DwellConfig {
                p_dwell: 0.3,
                remainder: ln(180.0, 0.5),
                min_stay_s: 15.0,
                rooms: [
                    ("living", ln(300.0, 0.8)),
                    ("kitchen", ln(240.0, 0.8)),
                    ("bedroom", ln(300.0, 0.8)),
                    ("bathroom", ln(150.0, 0.8)),
                    ("closet", ln(90.0, 0.8)),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            },
            line: LineConfig {
                room: "living".into(),
                positions_m: vec![0.0, 0.6, 1.2, 1.8, 2.4],
                jitter_s: 0.05,
                pause_fraction: 0.1,
                pause_min_s: 20.0,
                pause_max_s: 120.0,
            },
            velocity: VelocityConfig {
                start_cm_s: 100.0,
                end_cm_s: 60.0,
                knots: Vec::new(),
                travel_noise_sigma: 0.08,
            },
            schedule: ScheduleConfig {
                active_start_hour: 7,
                active_end_hour: 22,
                transitions_per_day: 110.0,
                in_room_gap_s: 120.0,
                clinic_noise_sd: 0.0,
                outage_days_per_year: 4.0,
            },
        }
    }
}

impl HouseholdConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.participant.is_empty() || self.participant.contains(',') {
            return Err(cfg_err("participant", "must be non-empty without commas"));
        }
        let labels: BTreeSet<&str> = self.rooms.labels.iter().map(String::as_str).collect();
        if labels.len() < 2 || labels.len() != self.rooms.labels.len() {
            return Err(cfg_err("rooms.labels", "need at least 2 distinct labels"));
        }
        if labels.iter().any(|l| l.is_empty() || l.contains([',', ':'])) {
            return Err(cfg_err("rooms.labels", "labels must be non-empty without `,` or `:`"));
        }
        if !(self.rooms.refractory_s >= 0.0 && self.rooms.refractory_s.is_finite()) {
            return Err(cfg_err("rooms.refractory_s", "must be ≥ 0"));
        }
        if let Some(s) = &self.rooms.start_room {
            if !labels.contains(s.as_str()) {
                return Err(cfg_err("rooms.start_room", format!("unknown room `{s}`")));
            }
        }
        for (i, e) in self.adjacency.edges.iter().enumerate() {
            let field = format!("adjacency.edges[{i}]");
            if !labels.contains(e.from.as_str()) || !labels.contains(e.to.as_str()) {
                return Err(cfg_err(field, format!("unknown room in `{}`–`{}`", e.from, e.to)));
            }
            if e.from == e.to {
                return Err(cfg_err(field, "self loop"));
            }
            if !(e.meters > 0.0 && e.meters.is_finite()) {
                return Err(cfg_err(field + ".meters", "distance must be > 0"));
            }
        }
        let adj = self.neighbors();
        if let Some(l) = labels.iter().find(|l| adj.get(**l).is_none_or(Vec::is_empty)) {
            return Err(cfg_err("adjacency.edges", format!("room `{l}` has no doors")));
        }
        let d = &self.dwell;
        if !(0.0..=1.0).contains(&d.p_dwell) {
            return Err(cfg_err("dwell.p_dwell", "must be in [0, 1]"));
        }
        check_lognormal("dwell.remainder", d.remainder)?;
        if !(d.min_stay_s >= 0.0 && d.min_stay_s.is_finite()) {
            return Err(cfg_err("dwell.min_stay_s", "must be ≥ 0"));
        }
        for l in &labels {
            let p = d
                .rooms
                .get(*l)
                .ok_or_else(|| cfg_err(format!("dwell.rooms.{l}"), "missing"))?;
            check_lognormal(&format!("dwell.rooms.{l}"), *p)?;
        }
        if let Some(k) = d.rooms.keys().find(|k| !labels.contains(k.as_str())) {
            return Err(cfg_err(format!("dwell.rooms.{k}"), "unknown room"));
        }
        let line = &self.line;
        if !labels.contains(line.room.as_str()) {
            return Err(cfg_err("line.room", format!("unknown room `{}`", line.room)));
        }
        LineGeometry::new(line.positions_m.clone()).map_err(|e| cfg_err("line.positions_m", e.to_string()))?;
        if !(line.jitter_s >= 0.0 && line.jitter_s.is_finite()) {
            return Err(cfg_err("line.jitter_s", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&line.pause_fraction) {
            return Err(cfg_err("line.pause_fraction", "must be in [0, 1]"));
        }
        if !(line.pause_min_s >= 0.0 && line.pause_max_s >= line.pause_min_s && line.pause_max_s.is_finite()) {
            return Err(cfg_err("line.pause_max_s", "need 0 ≤ pause_min_s ≤ pause_max_s"));
        }
        let v = &self.velocity;
        for (i, k) in v.knots.iter().enumerate() {
            if !k[0].is_finite() || !(k[1] > 0.0 && k[1].is_finite()) {
                return Err(cfg_err(format!("velocity.knots[{i}]"), "need a finite day and a velocity > 0"));
            }
            if i > 0 && k[0] <= v.knots[i - 1][0] {
                return Err(cfg_err(format!("velocity.knots[{i}]"), "days must strictly increase"));
            }
        }
        if v.knots.is_empty() {
            if !(v.start_cm_s > 0.0 && v.start_cm_s.is_finite()) {
                return Err(cfg_err("velocity.start_cm_s", "must be > 0"));
            }
            if !(v.end_cm_s > 0.0 && v.end_cm_s.is_finite()) {
                return Err(cfg_err("velocity.end_cm_s", "must be > 0"));
            }
        }
        if !(v.travel_noise_sigma >= 0.0 && v.travel_noise_sigma.is_finite()) {
            return Err(cfg_err("velocity.travel_noise_sigma", "must be ≥ 0"));
        }
        // Jitter must not reorder neighbouring elements at the fastest speed.
        let vmax = self.max_velocity();
        let min_spacing = line.positions_m.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if 2.0 * line.jitter_s >= min_spacing * 100.0 / vmax {
            return Err(cfg_err("line.jitter_s", "too large for element spacing at peak velocity"));
        }
        let s = &self.schedule;
        if s.active_start_hour >= s.active_end_hour || s.active_end_hour > 24 {
            return Err(cfg_err("schedule.active_end_hour", "need active_start_hour < active_end_hour ≤ 24"));
        }
        if !(s.transitions_per_day >= 0.0 && s.transitions_per_day.is_finite()) {
            return Err(cfg_err("schedule.transitions_per_day", "must be ≥ 0"));
        }
        if !(s.in_room_gap_s > 0.0 && s.in_room_gap_s.is_finite()) {
            return Err(cfg_err("schedule.in_room_gap_s", "must be > 0"));
        }
        if !(s.clinic_noise_sd >= 0.0 && s.clinic_noise_sd.is_finite()) {
            return Err(cfg_err("schedule.clinic_noise_sd", "must be ≥ 0"));
        }
        if !(0.0..=365.0).contains(&s.outage_days_per_year) {
            return Err(cfg_err("schedule.outage_days_per_year", "must be in [0, 365]"));
        }
        Ok(())
    }

    fn neighbors(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut adj: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for e in &self.adjacency.edges {
            adj.entry(e.from.as_str()).or_default().push((e.to.as_str(), e.meters));
            adj.entry(e.to.as_str()).or_default().push((e.from.as_str(), e.meters));
        }
        for v in adj.values_mut() {
            v.sort_by(|a, b| a.0.cmp(b.0));
            v.dedup_by(|a, b| a.0 == b.0);
        }
        adj
    }

    fn max_velocity(&self) -> f64 {
        let v = &self.velocity;
        if v.knots.is_empty() {
            v.start_cm_s.max(v.end_cm_s)
        } else {
            v.knots.iter().map(|k| k[1]).fold(f64::MIN, f64::max)
        }
    }

    /// True velocity on day `day` of an `n_days` run.
    pub fn velocity_on(&self, day: u32, n_days: u32) -> f64 {
        let v = &self.velocity;
        let t = f64::from(day);
        if v.knots.is_empty() {
            let frac = if n_days > 1 { t / f64::from(n_days - 1) } else { 0.0 };
            return v.start_cm_s + (v.end_cm_s - v.start_cm_s) * frac;
        }
        let k = &v.knots;
        if t <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            if t <= w[1][0] {
                let f = (t - w[0][0]) / (w[1][0] - w[0][0]);
                return w[0][1] + f * (w[1][1] - w[0][1]);
            }
        }
        k[k.len() - 1][1]
    }

    pub fn geometry(&self) -> LineGeometry {
        LineGeometry {
            positions_m: self.line.positions_m.clone(),
        }
    }
}

fn check_lognormal(field: &str, p: LogNormalParams) -> Result<(), SimError> {
    if !p.mu.is_finite() || !(p.sigma >= 0.0 && p.sigma.is_finite()) {
        return Err(cfg_err(field, "need finite mu and sigma ≥ 0"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDay {
    pub participant: String,
    pub date: NaiveDate,
    pub velocity_cm_s: f64,
}

/// One room change as the extractor will see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub participant: String,
    pub date: NaiveDate,
    pub pair: RoomPair,
    /// Measured duration: arrival firing minus the origin's last firing.
    pub measured_s: f64,
    pub travel_s: f64,
    pub contaminated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTruth {
    pub daily: Vec<TruthDay>,
    /// In emission order, one per extracted transition.
    pub records: Vec<TruthRecord>,
    pub clinic: Vec<ClinicVisit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Time-ordered.
    pub events: Vec<SensorEvent>,
    pub truth: SimTruth,
    pub exclusions: ExclusionCalendar,
    pub geometry: LineGeometry,
}

struct Firing {
    ms: i64,
    sensor: usize,
}

struct DaySim<'a> {
    cfg: &'a HouseholdConfig,
    rng: &'a mut ChaCha8Rng,
    refractory_ms: i64,
    area: Vec<Firing>,
    line: Vec<(i64, u32)>,
    last_fire: Vec<i64>,
}

fn ms(seconds: f64) -> i64 {
    (seconds * 1000.0).round() as i64
}

impl DaySim<'_> {
    fn fire(&mut self, sensor: usize, t: i64) {
        debug_assert!(t - self.last_fire[sensor] >= self.refractory_ms, "refractory violated");
        self.last_fire[sensor] = t;
        self.area.push(Firing { ms: t, sensor });
    }

    /// In-room firings strictly after `from` and no later than `until`.
    fn in_room(&mut self, sensor: usize, from: i64, until: i64) {
        let gap = Exp::new(1.0 / self.cfg.schedule.in_room_gap_s).expect("positive rate");
        let mut t = from;
        loop {
            t += self.refractory_ms + ms(gap.sample(self.rng)).max(1);
            if t > until {
                break;
            }
            self.fire(sensor, t);
        }
    }

    /// Element firings for one pass starting at `t0`; returns the end time.
    fn traverse(&mut self, t0: i64, v_cm_s: f64) -> i64 {
        let line = &self.cfg.line;
        let n = line.positions_m.len();
        let forward = self.rng.random_bool(0.5);
        let pause_ms = if self.rng.random_bool(line.pause_fraction) {
            let p = if line.pause_max_s > line.pause_min_s {
                self.rng.random_range(line.pause_min_s..=line.pause_max_s)
            } else {
                line.pause_min_s
            };
            Some((self.rng.random_range(1..n), ms(p)))
        } else {
            None
        };
        let order: Vec<usize> = if forward { (0..n).collect() } else { (0..n).rev().collect() };
        let start_pos = line.positions_m[order[0]];
        let mut end = t0;
        for (step, &idx) in order.iter().enumerate() {
            let dist_cm = (line.positions_m[idx] - start_pos).abs() * 100.0;
            let jitter = if line.jitter_s > 0.0 {
                self.rng.random_range(-line.jitter_s..=line.jitter_s)
            } else {
                0.0
            };
            let mut t = t0 + ms(dist_cm / v_cm_s + jitter);
            if let Some((at, p)) = pause_ms {
                if step >= at {
                    t += p;
                }
            }
            self.line.push((t, idx as u32));
            end = end.max(t);
        }
        end
    }
}

fn outage_days(cfg: &HouseholdConfig, n_days: u32, rng: &mut ChaCha8Rng) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    let per_day = cfg.schedule.outage_days_per_year / 365.0;
    for d in 0..n_days {
        if per_day > 0.0 && rng.random_bool(per_day.min(1.0)) {
            out.insert(d);
        }
    }
    out
}

/// Runs the household for `n_days` days from `start_date`.
pub fn simulate(cfg: &HouseholdConfig, n_days: u32) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    if n_days == 0 {
        return Err(cfg_err("n_days", "must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = &cfg.rooms.labels;
    let room_index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let adj = cfg.neighbors();
    let neighbors: Vec<Vec<(usize, f64)>> = labels
        .iter()
        .map(|l| adj[l.as_str()].iter().map(|(r, m)| (room_index[r], *m)).collect())
        .collect();
    let stay: Vec<LogNormal<f64>> = labels
        .iter()
        .map(|l| {
            let p = cfg.dwell.rooms[l];
            LogNormal::new(p.mu, p.sigma).expect("validated")
        })
        .collect();
    let remainder = LogNormal::new(cfg.dwell.remainder.mu, cfg.dwell.remainder.sigma).expect("validated");
    let travel_noise = LogNormal::new(0.0, cfg.velocity.travel_noise_sigma).expect("validated");
    let start_room = cfg.rooms.start_room.as_deref().map_or(0, |r| room_index[r]);
    let line_room = room_index[cfg.line.room.as_str()];
    let refractory_ms = (cfg.rooms.refractory_s * 1000.0).ceil() as i64;
    let min_stay_ms = ms(cfg.dwell.min_stay_s).max(refractory_ms + 1);
    let outages = outage_days(cfg, n_days, &mut rng);

    let mut events = Vec::new();
    let mut truth = SimTruth::default();
    let mut exclusions = ExclusionCalendar::empty(cfg.participant.clone());
    let offset = Duration::minutes(i64::from(cfg.tz_offset_minutes));
    let area_ids: Vec<String> = labels.iter().map(|l| format!("area-{l}")).collect();
    let day_start = i64::from(cfg.schedule.active_start_hour) * 3_600_000;
    let day_end = i64::from(cfg.schedule.active_end_hour) * 3_600_000;

    for day in 0..n_days {
        let date = cfg.start_date + Duration::days(i64::from(day));
        let v = cfg.velocity_on(day, n_days);
        truth.daily.push(TruthDay {
            participant: cfg.participant.clone(),
            date,
            velocity_cm_s: v,
        });
        let outage = outages.contains(&day);
        if outage {
            exclusions.excluded.insert(date, ExclusionReason::SensorOutage);
        }
        let n_moves = if cfg.schedule.transitions_per_day > 0.0 {
            Poisson::new(cfg.schedule.transitions_per_day).expect("validated").sample(&mut rng) as usize
        } else {
            0
        };
        let mut sim = DaySim {
            cfg,
            rng: &mut rng,
            refractory_ms,
            area: Vec::new(),
            line: Vec::new(),
            last_fire: vec![i64::MIN / 2; labels.len()],
        };
        let mut day_records = Vec::new();
        if n_moves > 0 {
            let mut room = start_room;
            let mut arrive = day_start;
            sim.fire(room, arrive);
            let mut line_busy_until = i64::MIN;
            for _ in 0..n_moves {
                let mut depart = arrive + ms(stay[room].sample(sim.rng)).max(min_stay_ms);
                if room == line_room && arrive > line_busy_until {
                    let t0 = arrive + 1000;
                    let end = sim.traverse(t0, v);
                    line_busy_until = end;
                    depart = depart.max(end + 2000);
                }
                let contaminated = sim.rng.random_bool(cfg.dwell.p_dwell);
                let rem = if contaminated {
                    let r = ms(remainder.sample(sim.rng)).max(1);
                    depart = depart.max(arrive + r + refractory_ms);
                    r
                } else {
                    0
                };
                let (next, meters) = neighbors[room][sim.rng.random_range(0..neighbors[room].len())];
                let travel = ms(meters * 100.0 / v * travel_noise.sample(sim.rng)).max(1);
                if depart + travel > day_end {
                    break;
                }
                let last_origin = depart - rem;
                sim.in_room(room, arrive, last_origin - refractory_ms);
                if last_origin > arrive {
                    sim.fire(room, last_origin);
                }
                let arrival = depart + travel;
                sim.fire(next, arrival);
                day_records.push(TruthRecord {
                    participant: cfg.participant.clone(),
                    date,
                    pair: RoomPair::new(labels[room].clone(), labels[next].clone()),
                    measured_s: (arrival - last_origin) as f64 / 1000.0,
                    travel_s: travel as f64 / 1000.0,
                    contaminated,
                });
                room = next;
                arrive = arrival;
            }
            sim.in_room(room, arrive, day_end);
        }
        let (area, line) = (std::mem::take(&mut sim.area), std::mem::take(&mut sim.line));

        let to_utc = |t: i64| -> DateTime<Utc> {
            (date.and_hms_opt(0, 0, 0).unwrap() + Duration::milliseconds(t) - offset).and_utc()
        };
        let mut day_events: Vec<(i64, u8, SensorEvent)> = area
            .into_iter()
            .map(|f| {
                (
                    f.ms,
                    0,
                    SensorEvent {
                        participant: cfg.participant.clone(),
                        timestamp: to_utc(f.ms),
                        sensor: area_ids[f.sensor].clone(),
                        kind: SensorKind::AreaMotion {
                            room: labels[f.sensor].clone(),
                        },
                    },
                )
            })
            .collect();
        if !outage {
            day_events.extend(line.into_iter().map(|(t, idx)| {
                (
                    t,
                    1,
                    SensorEvent {
                        participant: cfg.participant.clone(),
                        timestamp: to_utc(t),
                        sensor: format!("line-{idx}"),
                        kind: SensorKind::LineElement {
                            index: idx,
                            position_m: cfg.line.positions_m[idx as usize],
                        },
                    },
                )
            }));
        }
        if (day + 1) % 365 == 0 {
            let noise = if cfg.schedule.clinic_noise_sd > 0.0 {
                rand_distr::Normal::new(0.0, cfg.schedule.clinic_noise_sd)
                    .expect("validated")
                    .sample(&mut rng)
            } else {
                0.0
            };
            let velocity = round_to(v + noise, 1e-6);
            let t = 12 * 3_600_000;
            day_events.push((
                t,
                2,
                SensorEvent {
                    participant: cfg.participant.clone(),
                    timestamp: to_utc(t),
                    sensor: "clinic".into(),
                    kind: SensorKind::ClinicWalk { velocity_cm_s: velocity },
                },
            ));
            truth.clinic.push(ClinicVisit {
                participant: cfg.participant.clone(),
                date,
                velocity_cm_s: velocity,
            });
        }
        day_events.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        events.extend(day_events.into_iter().map(|e| e.2));
        truth.records.extend(day_records);
    }
    Ok(SimOutput {
        events,
        truth,
        exclusions,
        geometry: cfg.geometry(),
    })
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// `n` households derived from `base`: ids `h01`, `h02`, …, independent
/// seeds, and starting velocity scaled by a factor in [0.6, 1.4] with the
/// same relative decline.
pub fn cohort(base: &HouseholdConfig, n: usize, seed: u64) -> Vec<HouseholdConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut c = base.clone();
            c.participant = format!("h{:02}", i + 1);
            c.seed = rng.random();
            let f: f64 = rng.random_range(0.6..=1.4);
            c.velocity.start_cm_s *= f;
            c.velocity.end_cm_s *= f;
            for k in &mut c.velocity.knots {
                k[1] *= f;
            }
            c
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, SimError> {
    fs::File::create(path).map(BufWriter::new).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_truth_daily_csv<W: Write>(days: &[TruthDay], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_DAILY_HEADER)?;
    for d in days {
        w.write_record([d.participant.clone(), d.date.to_string(), d.velocity_cm_s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_records_csv<W: Write>(records: &[TruthRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.participant.clone(),
            r.date.to_string(),
            r.pair.from.clone(),
            r.pair.to.clone(),
            r.measured_s.to_string(),
            r.travel_s.to_string(),
            r.contaminated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`export`].
pub const EXPORT_FILES: [&str; 6] = [
    "events.csv",
    "truth_daily.csv",
    "truth_records.csv",
    "clinic.csv",
    "exclusions.csv",
    "line.csv",
];

/// Writes the event stream in ingest format alongside the truth tables,
/// clinic results, exclusion calendar and line geometry.
pub fn export(out: &SimOutput, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|source| SimError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let p = dir.join("events.csv");
    ingest::write_event_csv(&out.events, create(&p)?).map_err(|e| write_err(&p, e))?;
    let p = dir.join("truth_daily.csv");
    write_truth_daily_csv(&out.truth.daily, create(&p)?).map_err(|e| write_err(&p, e))?;
    let p = dir.join("truth_records.csv");
    write_truth_records_csv(&out.truth.records, create(&p)?).map_err(|e| write_err(&p, e))?;
    let p = dir.join("clinic.csv");
    ingest::write_clinic_csv(&out.truth.clinic, create(&p)?).map_err(|e| write_err(&p, e))?;
    let p = dir.join("exclusions.csv");
    ingest::write_exclusion_csv(std::slice::from_ref(&out.exclusions), create(&p)?).map_err(|e| write_err(&p, e))?;
    let p = dir.join("line.csv");
    write_line_geometry_csv(&out.geometry, create(&p)?).map_err(|e| write_err(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::split_days;
    use crate::transitions::extract_transitions;

    fn quiet(mut cfg: HouseholdConfig) -> HouseholdConfig {
        cfg.schedule.outage_days_per_year = 0.0;
        cfg
    }

    #[test]
    fn default_config_validates_and_round_trips_toml() {
        let cfg = HouseholdConfig::default();
        cfg.validate().unwrap();
        let back = HouseholdConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = HouseholdConfig::default();
        cfg.adjacency.edges[2].meters = 0.0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("adjacency.edges[2].meters"), "{e}");

        let mut cfg = HouseholdConfig::default();
        cfg.line.positions_m = vec![0.0, 1.0, 1.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("line.positions_m"));

        let mut cfg = HouseholdConfig::default();
        cfg.velocity.knots = vec![[0.0, 80.0], [10.0, 0.0]];
        assert!(cfg.validate().unwrap_err().to_string().contains("velocity.knots[1]"));

        let mut cfg = HouseholdConfig::default();
        cfg.rooms.refractory_s = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("rooms.refractory_s"));
    }

    #[test]
    fn zero_rate_gives_no_area_events() {
        let mut cfg = quiet(HouseholdConfig::default());
        cfg.schedule.transitions_per_day = 0.0;
        let out = simulate(&cfg, 1).unwrap();
        assert!(out.events.iter().all(|e| e.room().is_none()));
        assert!(out.events.is_empty());
        let out = simulate(&cfg, 365).unwrap();
        assert_eq!(out.events.len(), 1);
        assert!(matches!(out.events[0].kind, SensorKind::ClinicWalk { .. }));
    }

    #[test]
    fn closed_form_travel_time() {
        let mut cfg = quiet(HouseholdConfig::default());
        cfg.adjacency.edges.iter_mut().for_each(|e| e.meters = 4.0);
        cfg.velocity.start_cm_s = 100.0;
        cfg.velocity.end_cm_s = 100.0;
        cfg.velocity.travel_noise_sigma = 0.0;
        cfg.dwell.p_dwell = 0.0;
        let out = simulate(&cfg, 3).unwrap();
        let days = split_days(&out.events, 0);
        let recs: Vec<_> = days.iter().flat_map(extract_transitions).collect();
        assert!(recs.len() > 100);
        assert!(recs.iter().all(|r| r.duration == 4.0));
    }

    #[test]
    fn records_align_with_extraction() {
        let cfg = quiet(HouseholdConfig { seed: 5, ..HouseholdConfig::default() });
        let out = simulate(&cfg, 20).unwrap();
        let days = split_days(&out.events, cfg.tz_offset_minutes);
        let recs: Vec<_> = days.iter().flat_map(extract_transitions).collect();
        assert_eq!(recs.len(), out.truth.records.len());
        for (r, t) in recs.iter().zip(&out.truth.records) {
            assert_eq!(r.pair, t.pair);
            assert_eq!(r.date, t.date);
            assert!((r.duration - t.measured_s).abs() < 1e-9);
            if !t.contaminated {
                assert!((t.measured_s - t.travel_s).abs() < 1e-9);
            } else {
                assert!(t.measured_s > t.travel_s);
            }
        }
    }

    #[test]
    fn tz_offset_keeps_local_days() {
        let cfg = HouseholdConfig {
            tz_offset_minutes: -300,
            seed: 2,
            ..quiet(HouseholdConfig::default())
        };
        let out = simulate(&cfg, 4).unwrap();
        let days = split_days(&out.events, -300);
        assert_eq!(days.len(), 4);
        assert_eq!(days[0].date, cfg.start_date);
    }

    #[test]
    fn velocity_profiles() {
        let cfg = HouseholdConfig::default();
        assert_eq!(cfg.velocity_on(0, 11), 100.0);
        assert_eq!(cfg.velocity_on(10, 11), 60.0);
        assert_eq!(cfg.velocity_on(5, 11), 80.0);
        let mut k = cfg.clone();
        k.velocity.knots = vec![[10.0, 90.0], [20.0, 70.0]];
        assert_eq!(k.velocity_on(0, 100), 90.0);
        assert_eq!(k.velocity_on(15, 100), 80.0);
        assert_eq!(k.velocity_on(50, 100), 70.0);
    }

    #[test]
    fn cohort_is_deterministic_and_distinct() {
        let base = HouseholdConfig::default();
        let a = cohort(&base, 4, 9);
        assert_eq!(a, cohort(&base, 4, 9));
        assert_eq!(a[3].participant, "h04");
        assert!(a.windows(2).all(|w| w[0].seed != w[1].seed));
        for c in &a {
            assert!((c.velocity.end_cm_s / c.velocity.start_cm_s - 0.6).abs() < 1e-12);
        }
    }
}
