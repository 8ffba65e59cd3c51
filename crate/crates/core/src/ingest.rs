//! Scenario files: SUMO FCD XML and the equivalent flat CSV.
//!
//! Both parsers produce the same normalized [`Scenario`]: timesteps in strictly
//! increasing time, vehicles sorted by id byte order, angles reduced into
//! `[0, 360)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: &str = "t,id,x,y,speed,angle";

const MAX_PLAUSIBLE_SPEED: f64 = 100.0;
const MAX_PLAUSIBLE_COORD: f64 = 1e7;

/// Opaque vehicle identifier. Ordering is byte order of the underlying text.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(Arc<str>);

impl VehicleId {
    pub fn new(id: impl AsRef<str>) -> Self {
        VehicleId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl From<&str> for VehicleId {
    fn from(s: &str) -> Self {
        VehicleId::new(s)
    }
}

/// Kinematic state of one vehicle at one timestep.
///
/// `angle` is compass style: 0 is north, increasing clockwise.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub angle: f64,
}

impl VehicleState {
    pub fn new(id: impl AsRef<str>, x: f64, y: f64, speed: f64, angle: f64) -> Self {
        VehicleState {
            id: VehicleId::new(id),
            x,
            y,
            speed,
            angle: normalize_angle(angle),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timestep {
    pub time: f64,
    pub vehicles: Vec<VehicleState>,
}

impl Timestep {
    /// Builds a timestep, sorting vehicles by id.
    pub fn new(time: f64, mut vehicles: Vec<VehicleState>) -> Self {
        vehicles.sort_by(|a, b| a.id.cmp(&b.id));
        Timestep { time, vehicles }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub timesteps: Vec<Timestep>,
    pub nominal_dt: f64,
}

impl Scenario {
    /// Assembles a scenario from timesteps that are already in strictly increasing time.
    pub fn new(name: impl Into<String>, timesteps: Vec<Timestep>) -> Self {
        let nominal_dt = nominal_dt(&timesteps);
        Scenario {
            name: name.into(),
            timesteps,
            nominal_dt,
        }
    }

    pub fn record_count(&self) -> usize {
        self.timesteps.iter().map(|ts| ts.vehicles.len()).sum()
    }

    /// Renders the scenario as CSV with the standard header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.record_count() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for ts in &self.timesteps {
            for v in &ts.vehicles {
                use std::fmt::Write;
                let _ = writeln!(out, "{},{},{},{},{},{}", ts.time, v.id, v.x, v.y, v.speed, v.angle);
            }
        }
        out
    }
}

/// Median of consecutive time deltas, or 1.0 with fewer than two timesteps.
fn nominal_dt(timesteps: &[Timestep]) -> f64 {
    if timesteps.len() < 2 {
        return 1.0;
    }
    let mut deltas: Vec<f64> = timesteps.windows(2).map(|w| w[1].time - w[0].time).collect();
    deltas.sort_by(f64::total_cmp);
    let mid = deltas.len() / 2;
    if deltas.len() % 2 == 1 {
        deltas[mid]
    } else {
        (deltas[mid - 1] + deltas[mid]) / 2.0
    }
}

pub fn normalize_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("malformed XML at line {line}: {message}")]
    Xml { line: usize, message: String },
    #[error("missing attribute `{attribute}` on vehicle at t={time}")]
    MissingAttribute { attribute: &'static str, time: String },
    #[error("missing attribute `time` on timestep at line {line}")]
    MissingTime { line: usize },
    #[error("invalid number `{value}` for `{field}` at line {line}")]
    InvalidNumber {
        field: &'static str,
        value: String,
        line: usize,
    },
    #[error("negative speed {value} at line {line}")]
    NegativeSpeed { value: f64, line: usize },
    #[error("negative time {value} at line {line}")]
    NegativeTime { value: f64, line: usize },
    #[error("empty vehicle id at line {line}")]
    EmptyId { line: usize },
    #[error("bad header: expected `{CSV_HEADER}`")]
    BadHeader,
    #[error("wrong field count at row {row}: expected 6, found {found}")]
    FieldCount { row: usize, found: usize },
    #[error("non-monotonic time at row {row}")]
    NonMonotonicCsv { row: usize },
    #[error("non-monotonic time at line {line}: timestep times must strictly increase")]
    NonMonotonicXml { line: usize },
    #[error("input is not valid UTF-8")]
    Utf8,
}

fn parse_number(field: &'static str, value: &str, line: usize) -> Result<f64, ParseError> {
    match value.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::InvalidNumber {
            field,
            value: value.to_string(),
            line,
        }),
    }
}

fn checked_state(id: &str, x: f64, y: f64, speed: f64, angle: f64, line: usize) -> Result<VehicleState, ParseError> {
    if id.is_empty() {
        return Err(ParseError::EmptyId { line });
    }
    if speed < 0.0 {
        return Err(ParseError::NegativeSpeed { value: speed, line });
    }
    Ok(VehicleState::new(id, x, y, speed, angle))
}

fn checked_time(time: f64, line: usize) -> Result<f64, ParseError> {
    if time < 0.0 {
        return Err(ParseError::NegativeTime { value: time, line });
    }
    Ok(time)
}

/// Parses a SUMO floating-car-data export.
///
/// Only `<timestep time>` and its `<vehicle id x y speed angle>` children are
/// read; the root element name and any other attributes are ignored.
pub fn parse_fcd_xml(bytes: &[u8]) -> Result<Scenario, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ParseError::Utf8)?;
    let mut reader = Reader::from_str(text);
    let mut lines = LineTracker::new(text.as_bytes());
    let mut depth = 0usize;

    let mut timesteps: Vec<Timestep> = Vec::new();
    let mut current: Option<(f64, String, Vec<VehicleState>)> = None;

    loop {
        let start_pos = reader.buffer_position();
        let event = match reader.read_event() {
            Ok(ev) => ev,
            Err(e) => {
                return Err(ParseError::Xml {
                    line: lines.line_at(reader.error_position()),
                    message: e.to_string(),
                })
            }
        };
        match &event {
            Event::Start(_) => depth += 1,
            Event::End(_) => depth = depth.saturating_sub(1),
            _ => {}
        }
        match event {
            Event::Start(ref e) | Event::Empty(ref e) if e.name().as_ref() == b"timestep" => {
                let line = lines.line_at(start_pos);
                let raw = attribute(e, b"time", line)?.ok_or(ParseError::MissingTime { line })?;
                let time = checked_time(parse_number("time", &raw, line)?, line)?;
                let last = current.as_ref().map(|c| c.0).or(timesteps.last().map(|ts| ts.time));
                if current.is_some() {
                    return Err(ParseError::Xml {
                        line,
                        message: "nested <timestep> element".into(),
                    });
                }
                if last.is_some_and(|prev| time <= prev) {
                    return Err(ParseError::NonMonotonicXml { line });
                }
                if matches!(event, Event::Empty(_)) {
                    timesteps.push(Timestep::new(time, Vec::new()));
                } else {
                    current = Some((time, raw, Vec::new()));
                }
            }
            Event::End(e) if e.name().as_ref() == b"timestep" => {
                if let Some((time, _, vehicles)) = current.take() {
                    timesteps.push(Timestep::new(time, vehicles));
                }
            }
            Event::Start(e) | Event::Empty(e) if e.name().as_ref() == b"vehicle" => {
                let line = lines.line_at(start_pos);
                if let Some((_, raw_time, vehicles)) = current.as_mut() {
                    let get = |name: &'static str| -> Result<String, ParseError> {
                        attribute(&e, name.as_bytes(), line)?.ok_or_else(|| ParseError::MissingAttribute {
                            attribute: name,
                            time: raw_time.clone(),
                        })
                    };
                    let id = get("id")?;
                    let x = parse_number("x", &get("x")?, line)?;
                    let y = parse_number("y", &get("y")?, line)?;
                    let speed = parse_number("speed", &get("speed")?, line)?;
                    let angle = parse_number("angle", &get("angle")?, line)?;
                    vehicles.push(checked_state(&id, x, y, speed, angle, line)?);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if depth > 0 || current.is_some() {
        return Err(ParseError::Xml {
            line: lines.line_at(text.len() as u64),
            message: "unexpected end of document: unclosed element".into(),
        });
    }
    Ok(Scenario::new("", timesteps))
}

/// Converts byte offsets to 1-based line numbers for offsets visited in increasing order.
struct LineTracker<'a> {
    text: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> LineTracker<'a> {
    fn new(text: &'a [u8]) -> Self {
        LineTracker { text, pos: 0, line: 1 }
    }

    fn line_at(&mut self, pos: u64) -> usize {
        let pos = (pos as usize).min(self.text.len());
        if pos < self.pos {
            self.pos = 0;
            self.line = 1;
        }
        self.line += self.text[self.pos..pos].iter().filter(|&&b| b == b'\n').count();
        self.pos = pos;
        self.line
    }
}

fn attribute(e: &BytesStart, name: &[u8], line: usize) -> Result<Option<String>, ParseError> {
    for attr in e.attributes() {
        let attr = attr.map_err(|err| ParseError::Xml {
            line,
            message: err.to_string(),
        })?;
        if attr.key.as_ref() == name {
            let value = attr.unescape_value().map_err(|err| ParseError::Xml {
                line,
                message: err.to_string(),
            })?;
            return Ok(Some(value.into_owned()));
        }
    }
    Ok(None)
}

/// Parses the flat `t,id,x,y,speed,angle` CSV form.
///
/// Rows sharing a time form one timestep. Row numbers in errors count the
/// header as row 1.
pub fn parse_csv(bytes: &[u8]) -> Result<Scenario, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ParseError::Utf8)?;
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    match lines.next() {
        Some(h) if h.trim_start_matches('\u{feff}') == CSV_HEADER => {}
        _ => return Err(ParseError::BadHeader),
    }

    let mut timesteps: Vec<Timestep> = Vec::new();
    let mut current: Option<(f64, Vec<VehicleState>)> = None;
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ParseError::FieldCount {
                row,
                found: fields.len(),
            });
        }
        let t = checked_time(parse_number("t", fields[0], row)?, row)?;
        let x = parse_number("x", fields[2], row)?;
        let y = parse_number("y", fields[3], row)?;
        let speed = parse_number("speed", fields[4], row)?;
        let angle = parse_number("angle", fields[5], row)?;
        let state = checked_state(fields[1], x, y, speed, angle, row)?;

        match current.as_mut() {
            Some((ct, vehicles)) if *ct == t => vehicles.push(state),
            Some((ct, _)) if t < *ct => return Err(ParseError::NonMonotonicCsv { row }),
            _ => {
                if let Some((ct, vehicles)) = current.take() {
                    timesteps.push(Timestep::new(ct, vehicles));
                }
                current = Some((t, vec![state]));
            }
        }
    }
    if let Some((ct, vehicles)) = current {
        timesteps.push(Timestep::new(ct, vehicles));
    }
    Ok(Scenario::new("", timesteps))
}

/// Scenario file encodings accepted by the parsers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Fcd,
    Csv,
}

impl TraceFormat {
    /// Guesses the encoding from content: XML documents start with `<`.
    pub fn sniff(bytes: &[u8]) -> TraceFormat {
        let first = bytes
            .iter()
            .find(|b| !(b.is_ascii_whitespace() || **b == 0xef || **b == 0xbb || **b == 0xbf));
        if first == Some(&b'<') {
            TraceFormat::Fcd
        } else {
            TraceFormat::Csv
        }
    }

    pub fn parse(self, bytes: &[u8]) -> Result<Scenario, ParseError> {
        match self {
            TraceFormat::Fcd => parse_fcd_xml(bytes),
            TraceFormat::Csv => parse_csv(bytes),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_timesteps: usize,
    pub n_vehicles: usize,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_runnable(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks a parsed scenario for conditions that block or degrade a run.
pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut report = ValidationReport {
        n_timesteps: s.timesteps.len(),
        ..Default::default()
    };
    if s.timesteps.iter().all(|ts| ts.vehicles.is_empty()) {
        report.errors.push("empty scenario".to_string());
    }

    // id -> index of the last timestep it was seen in
    let mut last_seen: BTreeMap<&VehicleId, usize> = BTreeMap::new();
    let mut reappeared: BTreeSet<&VehicleId> = BTreeSet::new();
    let mut fast: BTreeSet<&VehicleId> = BTreeSet::new();
    let mut far: BTreeSet<&VehicleId> = BTreeSet::new();

    for (k, ts) in s.timesteps.iter().enumerate() {
        let mut prev_dup: Option<&VehicleId> = None;
        for pair in ts.vehicles.windows(2) {
            if pair[0].id == pair[1].id && prev_dup != Some(&pair[0].id) {
                report
                    .errors
                    .push(format!("duplicate id {} at t={}", pair[0].id, ts.time));
                prev_dup = Some(&pair[0].id);
            }
        }
        for v in &ts.vehicles {
            if let Some(prev) = last_seen.insert(&v.id, k) {
                if prev + 1 < k && reappeared.insert(&v.id) {
                    report.warnings.push(format!("id {} reappears at t={}", v.id, ts.time));
                }
            }
            if v.speed > MAX_PLAUSIBLE_SPEED && fast.insert(&v.id) {
                report.warnings.push(format!(
                    "speed {} m/s exceeds {} m/s for id {} at t={}",
                    v.speed, MAX_PLAUSIBLE_SPEED, v.id, ts.time
                ));
            }
            if (v.x.abs() > MAX_PLAUSIBLE_COORD || v.y.abs() > MAX_PLAUSIBLE_COORD) && far.insert(&v.id) {
                report.warnings.push(format!(
                    "position ({}, {}) beyond 1e7 m for id {} at t={}",
                    v.x, v.y, v.id, ts.time
                ));
            }
        }
    }
    report.n_vehicles = last_seen.len();
    report
}
