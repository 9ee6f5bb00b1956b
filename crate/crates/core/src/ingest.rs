//! Sensor event and exclusion-calendar ingestion.
//!
//! Event CSV header: `participant,timestamp,sensor,kind,detail`, where `kind`
//! is one of `area`, `line`, `clinic` and `detail` is the room label, an
//! `index:position_m` pair, or a velocity in cm/s respectively. Timestamps
//! are RFC 3339 with a trailing `Z` and at most millisecond precision.
//!
//! Exclusion CSV header: `participant,date,reason` with reason one of
//! `guest`, `staff_visit`, `sensor_outage`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENT_HEADER: [&str; 5] = ["participant", "timestamp", "sensor", "kind", "detail"];
pub const EXCLUSION_HEADER: [&str; 3] = ["participant", "date", "reason"];
pub const CLINIC_HEADER: [&str; 3] = ["participant", "date", "velocity_cm_s"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: invalid {field}: {message}")]
    Field {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: unknown sensor kind `{kind}`")]
    UnknownKind { line: u64, kind: String },
    #[error("unexpected header `{found}`, expected `{expected}`")]
    Header { expected: String, found: String },
    #[error("line {line}: duplicate exclusion of {date} for participant `{participant}`")]
    DuplicateExclusion {
        line: u64,
        participant: String,
        date: NaiveDate,
    },
    #[error("event for participant `{event}` passed with calendar for `{calendar}`")]
    ParticipantMismatch { calendar: String, event: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// What a sensor firing reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SensorKind {
    AreaMotion { room: String },
    LineElement { index: u32, position_m: f64 },
    ClinicWalk { velocity_cm_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub participant: String,
    pub timestamp: DateTime<Utc>,
    pub sensor: String,
    pub kind: SensorKind,
}

impl SensorEvent {
    pub fn room(&self) -> Option<&str> {
        match &self.kind {
            SensorKind::AreaMotion { room } => Some(room),
            _ => None,
        }
    }

    pub fn local_date(&self, tz_offset_minutes: i32) -> NaiveDate {
        local_date(self.timestamp, tz_offset_minutes)
    }
}

/// Home-local calendar date of a UTC instant under a fixed offset.
pub fn local_date(ts: DateTime<Utc>, tz_offset_minutes: i32) -> NaiveDate {
    (ts + Duration::minutes(i64::from(tz_offset_minutes))).date_naive()
}

fn valid_range() -> (DateTime<Utc>, DateTime<Utc>) {
    let lo = NaiveDate::from_ymd_opt(1990, 1, 1).unwrap();
    let hi = NaiveDate::from_ymd_opt(2100, 1, 1).unwrap();
    (
        lo.and_hms_opt(0, 0, 0).unwrap().and_utc(),
        hi.and_hms_opt(0, 0, 0).unwrap().and_utc(),
    )
}

fn field_err(line: u64, field: &'static str, message: impl Into<String>) -> IngestError {
    IngestError::Field {
        line,
        field,
        message: message.into(),
    }
}

pub fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, String> {
    if !raw.ends_with('Z') {
        return Err(format!("`{raw}` must be RFC 3339 with trailing Z"));
    }
    let ts = DateTime::parse_from_rfc3339(raw)
        .map_err(|e| format!("`{raw}`: {e}"))?
        .with_timezone(&Utc);
    if ts.nanosecond() % 1_000_000 != 0 {
        return Err(format!("`{raw}` is finer than millisecond resolution"));
    }
    let (lo, hi) = valid_range();
    if ts < lo || ts >= hi {
        return Err(format!("`{raw}` outside [1990-01-01, 2100-01-01)"));
    }
    Ok(ts)
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), IngestError> {
    if found.iter().eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(IngestError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        })
    }
}

fn parse_kind(line: u64, kind: &str, detail: &str) -> Result<SensorKind, IngestError> {
    match kind {
        "area" => {
            if detail.is_empty() {
                return Err(field_err(line, "detail", "empty room label"));
            }
            Ok(SensorKind::AreaMotion {
                room: detail.to_string(),
            })
        }
        "line" => {
            let (idx, pos) = detail
                .split_once(':')
                .ok_or_else(|| field_err(line, "detail", format!("`{detail}` is not index:position_m")))?;
            let index = idx
                .parse::<u32>()
                .map_err(|e| field_err(line, "detail", format!("line index `{idx}`: {e}")))?;
            let position_m = pos
                .parse::<f64>()
                .map_err(|e| field_err(line, "detail", format!("line position `{pos}`: {e}")))?;
            if !position_m.is_finite() || position_m < 0.0 {
                return Err(field_err(line, "detail", format!("line position {position_m} must be finite and ≥ 0")));
            }
            Ok(SensorKind::LineElement { index, position_m })
        }
        "clinic" => {
            let velocity_cm_s = detail
                .parse::<f64>()
                .map_err(|e| field_err(line, "detail", format!("clinic velocity `{detail}`: {e}")))?;
            if !(velocity_cm_s > 0.0 && velocity_cm_s < 500.0) {
                return Err(field_err(line, "detail", format!("clinic velocity {velocity_cm_s} outside (0, 500) cm/s")));
            }
            Ok(SensorKind::ClinicWalk { velocity_cm_s })
        }
        other => Err(IngestError::UnknownKind {
            line,
            kind: other.to_string(),
        }),
    }
}

/// Parses an event CSV. Rows come back in file order; unsorted timestamps are
/// accepted.
pub fn parse_event_csv<R: Read>(input: R) -> Result<Vec<SensorEvent>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &EVENT_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != EVENT_HEADER.len() {
            return Err(field_err(line, "row", format!("expected 5 fields, found {}", row.len())));
        }
        let participant = &row[0];
        if participant.is_empty() {
            return Err(field_err(line, "participant", "empty"));
        }
        let timestamp = parse_timestamp(&row[1]).map_err(|m| field_err(line, "timestamp", m))?;
        let sensor = &row[2];
        if sensor.is_empty() {
            return Err(field_err(line, "sensor", "empty"));
        }
        let kind = parse_kind(line, &row[3], &row[4])?;
        out.push(SensorEvent {
            participant: participant.to_string(),
            timestamp,
            sensor: sensor.to_string(),
            kind,
        });
    }
    Ok(out)
}

/// Writes events in canonical form (millisecond timestamps, shortest
/// round-trip float formatting).
pub fn write_event_csv<W: Write>(events: &[SensorEvent], out: W) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(EVENT_HEADER)?;
    for e in events {
        let (kind, detail) = match &e.kind {
            SensorKind::AreaMotion { room } => ("area", room.clone()),
            SensorKind::LineElement { index, position_m } => ("line", format!("{index}:{position_m}")),
            SensorKind::ClinicWalk { velocity_cm_s } => ("clinic", velocity_cm_s.to_string()),
        };
        wtr.write_record([
            e.participant.as_str(),
            &format_timestamp(e.timestamp),
            e.sensor.as_str(),
            kind,
            &detail,
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Guest,
    StaffVisit,
    SensorOutage,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::Guest => "guest",
            ExclusionReason::StaffVisit => "staff_visit",
            ExclusionReason::SensorOutage => "sensor_outage",
        })
    }
}

impl FromStr for ExclusionReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "guest" => Ok(ExclusionReason::Guest),
            "staff_visit" => Ok(ExclusionReason::StaffVisit),
            "sensor_outage" => Ok(ExclusionReason::SensorOutage),
            other => Err(format!("unknown exclusion reason `{other}`")),
        }
    }
}

/// Whole days to drop for one participant.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusionCalendar {
    pub participant: String,
    pub excluded: BTreeMap<NaiveDate, ExclusionReason>,
}

impl ExclusionCalendar {
    pub fn empty(participant: impl Into<String>) -> Self {
        Self {
            participant: participant.into(),
            excluded: BTreeMap::new(),
        }
    }

    pub fn is_excluded(&self, date: NaiveDate) -> bool {
        self.excluded.contains_key(&date)
    }
}

/// Parses an exclusion CSV into one calendar per participant, sorted by id.
pub fn parse_exclusion_csv<R: Read>(input: R) -> Result<Vec<ExclusionCalendar>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &EXCLUSION_HEADER)?;
    let mut calendars: BTreeMap<String, ExclusionCalendar> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let participant = row[0].to_string();
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
            .map_err(|e| field_err(line, "date", format!("`{}`: {e}", &row[1])))?;
        let reason: ExclusionReason = row[2].parse().map_err(|m| field_err(line, "reason", m))?;
        let cal = calendars
            .entry(participant.clone())
            .or_insert_with(|| ExclusionCalendar::empty(participant.clone()));
        if cal.excluded.insert(date, reason).is_some() {
            return Err(IngestError::DuplicateExclusion {
                line,
                participant,
                date,
            });
        }
    }
    Ok(calendars.into_values().collect())
}

pub fn write_exclusion_csv<W: Write>(calendars: &[ExclusionCalendar], out: W) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(EXCLUSION_HEADER)?;
    for cal in calendars {
        for (date, reason) in &cal.excluded {
            wtr.write_record([cal.participant.clone(), date.to_string(), reason.to_string()])?;
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Drops every event whose home-local date is in the calendar.
pub fn apply_exclusions(
    events: &[SensorEvent],
    calendar: &ExclusionCalendar,
    tz_offset_minutes: i32,
) -> Result<Vec<SensorEvent>, IngestError> {
    if let Some(e) = events.iter().find(|e| e.participant != calendar.participant) {
        return Err(IngestError::ParticipantMismatch {
            calendar: calendar.participant.clone(),
            event: e.participant.clone(),
        });
    }
    Ok(events
        .iter()
        .filter(|e| !calendar.is_excluded(e.local_date(tz_offset_minutes)))
        .cloned()
        .collect())
}

/// Multi-participant variant: each event is checked against its own
/// participant's calendar; participants without a calendar pass through.
pub fn apply_calendars(
    events: &[SensorEvent],
    calendars: &[ExclusionCalendar],
    tz_offset_minutes: i32,
) -> Vec<SensorEvent> {
    let by_id: BTreeMap<&str, &ExclusionCalendar> =
        calendars.iter().map(|c| (c.participant.as_str(), c)).collect();
    events
        .iter()
        .filter(|e| {
            by_id
                .get(e.participant.as_str())
                .is_none_or(|c| !c.is_excluded(e.local_date(tz_offset_minutes)))
        })
        .cloned()
        .collect()
}

/// One participant's events for one home-local day, time-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct DayStream {
    pub participant: String,
    pub date: NaiveDate,
    pub events: Vec<SensorEvent>,
}

/// Buckets events by (participant, local date). Output is ordered by
/// participant then date; events within a day are stably sorted by time.
pub fn split_days(events: &[SensorEvent], tz_offset_minutes: i32) -> Vec<DayStream> {
    let mut buckets: BTreeMap<(String, NaiveDate), Vec<SensorEvent>> = BTreeMap::new();
    for e in events {
        buckets
            .entry((e.participant.clone(), e.local_date(tz_offset_minutes)))
            .or_default()
            .push(e.clone());
    }
    buckets
        .into_iter()
        .map(|((participant, date), mut events)| {
            events.sort_by_key(|e| e.timestamp);
            DayStream {
                participant,
                date,
                events,
            }
        })
        .collect()
}

/// A clinic timed-walk result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicVisit {
    pub participant: String,
    pub date: NaiveDate,
    pub velocity_cm_s: f64,
}

pub fn clinic_visits(events: &[SensorEvent], tz_offset_minutes: i32) -> Vec<ClinicVisit> {
    let mut visits: Vec<ClinicVisit> = events
        .iter()
        .filter_map(|e| match e.kind {
            SensorKind::ClinicWalk { velocity_cm_s } => Some(ClinicVisit {
                participant: e.participant.clone(),
                date: e.local_date(tz_offset_minutes),
                velocity_cm_s,
            }),
            _ => None,
        })
        .collect();
    visits.sort_by(|a, b| (&a.participant, a.date).cmp(&(&b.participant, b.date)));
    visits
}

pub fn parse_clinic_csv<R: Read>(input: R) -> Result<Vec<ClinicVisit>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &CLINIC_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
            .map_err(|e| field_err(line, "date", format!("`{}`: {e}", &row[1])))?;
        let velocity_cm_s: f64 = row[2]
            .parse()
            .map_err(|e| field_err(line, "velocity_cm_s", format!("`{}`: {e}", &row[2])))?;
        out.push(ClinicVisit {
            participant: row[0].to_string(),
            date,
            velocity_cm_s,
        });
    }
    Ok(out)
}

pub fn write_clinic_csv<W: Write>(visits: &[ClinicVisit], out: W) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CLINIC_HEADER)?;
    for v in visits {
        wtr.write_record([v.participant.clone(), v.date.to_string(), v.velocity_cm_s.to_string()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn area(p: &str, t: DateTime<Utc>, room: &str) -> SensorEvent {
        SensorEvent {
            participant: p.into(),
            timestamp: t,
            sensor: format!("area-{room}"),
            kind: SensorKind::AreaMotion { room: room.into() },
        }
    }

    #[test]
    fn header_only_is_empty() {
        let evs = parse_event_csv("participant,timestamp,sensor,kind,detail\n".as_bytes()).unwrap();
        assert!(evs.is_empty());
    }

    #[test]
    fn single_area_row() {
        let src = "participant,timestamp,sensor,kind,detail\nP1,2010-03-01T08:00:00.000Z,S7,area,kitchen\n";
        let evs = parse_event_csv(src.as_bytes()).unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].participant, "P1");
        assert_eq!(evs[0].sensor, "S7");
        assert_eq!(evs[0].kind, SensorKind::AreaMotion { room: "kitchen".into() });
        assert_eq!(evs[0].timestamp, ts("2010-03-01T08:00:00.000Z"));
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let src = "participant,timestamp,sensor,kind,detail\n\
                   P1,2010-03-01T08:00:00.000Z,S7,area,kitchen\n\
                   P1,not-a-time,S7,area,kitchen\n";
        match parse_event_csv(src.as_bytes()) {
            Err(IngestError::Field { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "timestamp");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_kind_and_bad_details() {
        let bad_kind = "participant,timestamp,sensor,kind,detail\nP1,2010-03-01T08:00:00.000Z,S7,door,front\n";
        assert!(matches!(
            parse_event_csv(bad_kind.as_bytes()),
            Err(IngestError::UnknownKind { line: 2, .. })
        ));
        for detail in ["line,3", "line,a:1.0", "line,1:-2", "clinic,0", "clinic,600"] {
            let (k, d) = detail.split_once(',').unwrap();
            let src = format!("participant,timestamp,sensor,kind,detail\nP1,2010-03-01T08:00:00.000Z,S7,{k},{d}\n");
            assert!(
                matches!(parse_event_csv(src.as_bytes()), Err(IngestError::Field { field: "detail", .. })),
                "{detail}"
            );
        }
        let early = "participant,timestamp,sensor,kind,detail\nP1,1989-12-31T23:59:59.999Z,S7,area,x\n";
        assert!(parse_event_csv(early.as_bytes()).is_err());
        let offset = "participant,timestamp,sensor,kind,detail\nP1,2010-03-01T08:00:00.000+01:00,S7,area,x\n";
        assert!(parse_event_csv(offset.as_bytes()).is_err());
        let micro = "participant,timestamp,sensor,kind,detail\nP1,2010-03-01T08:00:00.000001Z,S7,area,x\n";
        assert!(parse_event_csv(micro.as_bytes()).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            parse_event_csv("a,b,c,d,e\n".as_bytes()),
            Err(IngestError::Header { .. })
        ));
    }

    #[test]
    fn unsorted_rows_keep_file_order() {
        let src = "participant,timestamp,sensor,kind,detail\n\
                   P1,2010-03-01T09:00:00.000Z,S1,area,kitchen\n\
                   P1,2010-03-01T08:00:00.000Z,L0,line,0:0\n\
                   P1,2010-03-01T07:00:00.000Z,C,clinic,95.5\n";
        let evs = parse_event_csv(src.as_bytes()).unwrap();
        assert_eq!(evs.len(), 3);
        assert!(evs[0].timestamp > evs[1].timestamp);
        assert_eq!(evs[2].kind, SensorKind::ClinicWalk { velocity_cm_s: 95.5 });
    }

    #[test]
    fn exclusions_identity_annihilator_and_middle_day() {
        let mut evs = Vec::new();
        for (day, count) in [(1, 4), (2, 3), (3, 5)] {
            for k in 0..count {
                evs.push(area("P1", ts(&format!("2010-03-0{day}T1{k}:00:00.000Z")), "kitchen"));
            }
        }
        let empty = ExclusionCalendar::empty("P1");
        assert_eq!(apply_exclusions(&evs, &empty, 0).unwrap(), evs);

        let mut all = ExclusionCalendar::empty("P1");
        for d in 1..=3 {
            all.excluded
                .insert(NaiveDate::from_ymd_opt(2010, 3, d).unwrap(), ExclusionReason::Guest);
        }
        assert!(apply_exclusions(&evs, &all, 0).unwrap().is_empty());

        let mut mid = ExclusionCalendar::empty("P1");
        mid.excluded
            .insert(NaiveDate::from_ymd_opt(2010, 3, 2).unwrap(), ExclusionReason::StaffVisit);
        let kept = apply_exclusions(&evs, &mid, 0).unwrap();
        let tally = |v: &[SensorEvent]| {
            let mut m: BTreeMap<NaiveDate, usize> = BTreeMap::new();
            for e in v {
                *m.entry(e.timestamp.date_naive()).or_default() += 1;
            }
            m
        };
        let before = tally(&evs);
        let after = tally(&kept);
        assert_eq!(after.len(), 2);
        assert_eq!(after[&NaiveDate::from_ymd_opt(2010, 3, 1).unwrap()], before[&NaiveDate::from_ymd_opt(2010, 3, 1).unwrap()]);
        assert_eq!(after[&NaiveDate::from_ymd_opt(2010, 3, 3).unwrap()], before[&NaiveDate::from_ymd_opt(2010, 3, 3).unwrap()]);
        assert_eq!(kept.len(), 9);
    }

    #[test]
    fn exclusion_uses_local_date_and_checks_participant() {
        // 23:30 UTC on the 1st is 01:30 local on the 2nd at +120 minutes.
        let evs = vec![area("P1", ts("2010-03-01T23:30:00.000Z"), "kitchen")];
        let mut cal = ExclusionCalendar::empty("P1");
        cal.excluded
            .insert(NaiveDate::from_ymd_opt(2010, 3, 2).unwrap(), ExclusionReason::SensorOutage);
        assert!(apply_exclusions(&evs, &cal, 120).unwrap().is_empty());
        assert_eq!(apply_exclusions(&evs, &cal, 0).unwrap().len(), 1);
        let other = ExclusionCalendar::empty("P2");
        assert!(matches!(
            apply_exclusions(&evs, &other, 0),
            Err(IngestError::ParticipantMismatch { .. })
        ));
    }

    #[test]
    fn exclusion_csv_rejects_duplicates() {
        let src = "participant,date,reason\nP1,2010-03-01,guest\nP1,2010-03-01,staff_visit\n";
        assert!(matches!(
            parse_exclusion_csv(src.as_bytes()),
            Err(IngestError::DuplicateExclusion { line: 3, .. })
        ));
        let ok = "participant,date,reason\nP2,2010-03-01,guest\nP1,2010-03-01,sensor_outage\n";
        let cals = parse_exclusion_csv(ok.as_bytes()).unwrap();
        assert_eq!(cals.len(), 2);
        assert_eq!(cals[0].participant, "P1");
        let mut buf = Vec::new();
        write_exclusion_csv(&cals, &mut buf).unwrap();
        assert_eq!(parse_exclusion_csv(buf.as_slice()).unwrap(), cals);
    }

    #[test]
    fn split_one_day_and_midnight_boundary() {
        let evs = vec![
            area("P1", ts("2010-03-01T10:00:00.000Z"), "a"),
            area("P1", ts("2010-03-01T08:00:00.000Z"), "b"),
        ];
        let days = split_days(&evs, 0);
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].events[0].room(), Some("b"));

        // Local offset −300: 04:59:59.999Z is 23:59:59.999 local on the 1st.
        let evs = vec![
            area("P1", ts("2010-03-02T04:59:59.999Z"), "a"),
            area("P1", ts("2010-03-02T05:00:00.000Z"), "b"),
        ];
        let days = split_days(&evs, -300);
        assert_eq!(days.len(), 2);
        assert_eq!(days[0].date, NaiveDate::from_ymd_opt(2010, 3, 1).unwrap());
        assert_eq!(days[1].date, NaiveDate::from_ymd_opt(2010, 3, 2).unwrap());
    }

    #[test]
    fn split_days_matches_bucket_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let start = ts("2010-03-01T00:00:00.000Z");
        let tz = 90;
        let evs: Vec<SensorEvent> = (0..1000)
            .map(|_| {
                let ms = rng.random_range(0..10 * 86_400_000i64);
                area("P1", start + Duration::milliseconds(ms), "k")
            })
            .collect();
        let days = split_days(&evs, tz);
        // Independent oracle: integer day index of (ms since epoch + offset).
        let mut oracle: BTreeMap<i64, usize> = BTreeMap::new();
        for e in &evs {
            let local_ms = e.timestamp.timestamp_millis() + i64::from(tz) * 60_000;
            *oracle.entry(local_ms.div_euclid(86_400_000)).or_default() += 1;
        }
        assert_eq!(days.len(), oracle.len());
        for (d, (_, n)) in days.iter().zip(&oracle) {
            assert_eq!(d.events.len(), *n);
        }
    }

    fn arb_event() -> impl Strategy<Value = SensorEvent> {
        let kind = prop_oneof![
            "[a-z]{1,8}".prop_map(|room| SensorKind::AreaMotion { room }),
            (0u32..8, 0.0f64..20.0).prop_map(|(index, position_m)| SensorKind::LineElement { index, position_m }),
            (1.0f64..400.0).prop_map(|velocity_cm_s| SensorKind::ClinicWalk { velocity_cm_s }),
        ];
        ("P[0-9]", 631_152_000_000i64..4_102_444_799_999, "S[0-9]{1,2}", kind).prop_map(|(p, ms, s, kind)| {
            SensorEvent {
                participant: p,
                timestamp: DateTime::from_timestamp_millis(ms).unwrap(),
                sensor: s,
                kind,
            }
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(events in proptest::collection::vec(arb_event(), 0..40)) {
            let mut buf = Vec::new();
            write_event_csv(&events, &mut buf).unwrap();
            let back = parse_event_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &events);
            let mut again = Vec::new();
            write_event_csv(&back, &mut again).unwrap();
            prop_assert_eq!(again, buf);
        }

        #[test]
        fn split_days_partitions(events in proptest::collection::vec(arb_event(), 0..60), tz in -720i32..840) {
            let days = split_days(&events, tz);
            let mut joined: Vec<SensorEvent> = days.iter().flat_map(|d| d.events.clone()).collect();
            for d in &days {
                prop_assert!(d.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
                prop_assert!(d.events.iter().all(|e| e.local_date(tz) == d.date && e.participant == d.participant));
            }
            let key = |e: &SensorEvent| (e.participant.clone(), e.timestamp);
            let mut sorted = events.clone();
            sorted.sort_by_key(key);
            joined.sort_by_key(key);
            prop_assert_eq!(joined.len(), sorted.len());
            for (a, b) in joined.iter().zip(&sorted) {
                prop_assert_eq!(key(a), key(b));
            }
        }

        #[test]
        fn exclusions_idempotent(events in proptest::collection::vec(arb_event(), 0..40), pick in proptest::collection::vec(any::<bool>(), 40)) {
            let events: Vec<SensorEvent> = events.into_iter().map(|mut e| { e.participant = "P1".into(); e }).collect();
            let mut cal = ExclusionCalendar::empty("P1");
            for (e, p) in events.iter().zip(&pick) {
                if *p {
                    cal.excluded.insert(e.local_date(0), ExclusionReason::Guest);
                }
            }
            let once = apply_exclusions(&events, &cal, 0).unwrap();
            let twice = apply_exclusions(&once, &cal, 0).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|e| events.contains(e)));
        }
    }
}
