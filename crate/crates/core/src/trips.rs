//! Trip-record CSV ingestion.
//!
//! Expected columns are `pickup_datetime`, `pu_zone_id` and `do_zone_id`;
//! the usual NYC TLC names (`tpep_pickup_datetime`, `PULocationID`,
//! `DOLocationID`) are accepted as well. Zone ids are matched against stop
//! labels. Timestamps are naive local time and become minutes since the Unix
//! epoch of that local clock.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use crate::router::Request;
use crate::substrate::SubstrateGraph;
use crate::{Error, Minutes, Result};

const PICKUP: &[&str] = &["pickup_datetime", "tpep_pickup_datetime", "lpep_pickup_datetime"];
const PU_ZONE: &[&str] = &["pu_zone_id", "PULocationID"];
const DO_ZONE: &[&str] = &["do_zone_id", "DOLocationID"];

const FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 local timestamp (seconds optional) into clock minutes.
pub fn parse_timestamp(s: &str) -> Option<Minutes> {
    let s = s.trim();
    let dt = FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })?;
    Some(dt.and_utc().timestamp_millis() as f64 / 60_000.0)
}

/// Formats clock minutes as `YYYY-MM-DDTHH:MM:SS`.
pub fn format_timestamp(t: Minutes) -> String {
    let secs = (t * 60.0).round() as i64;
    chrono::DateTime::from_timestamp(secs, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_else(|| format!("{t}"))
}

/// Parsed trips plus counts of the rows that were dropped.
#[derive(Debug, Clone, Default)]
pub struct TripLoad {
    /// Sorted by issue time.
    pub requests: Vec<Request>,
    pub rows: usize,
    pub same_zone: usize,
    pub unknown_zone: usize,
    pub malformed: usize,
}

impl TripLoad {
    pub fn dropped(&self) -> usize {
        self.same_zone + self.unknown_zone + self.malformed
    }
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Reads trip records whose zones are stops of `substrate`.
pub fn read_trips(path: &Path, substrate: &SubstrateGraph) -> Result<TripLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut load = TripLoad::default();
    if headers.is_empty() {
        return Ok(load);
    }
    let missing = |what: &str| Error::Parse {
        path: path.into(),
        line: 1,
        message: format!("missing column {what}"),
    };
    let t_col = column(&headers, PICKUP).ok_or_else(|| missing(PICKUP[0]))?;
    let pu_col = column(&headers, PU_ZONE).ok_or_else(|| missing(PU_ZONE[0]))?;
    let do_col = column(&headers, DO_ZONE).ok_or_else(|| missing(DO_ZONE[0]))?;

    for record in reader.records() {
        load.rows += 1;
        let Ok(record) = record else {
            load.malformed += 1;
            continue;
        };
        let field = |i: usize| record.get(i).map(str::trim);
        let t = field(t_col).and_then(parse_timestamp);
        let pu = field(pu_col).and_then(|s| s.parse::<u32>().ok());
        let dz = field(do_col).and_then(|s| s.parse::<u32>().ok());
        let (Some(t), Some(pu), Some(dz)) = (t, pu, dz) else {
            load.malformed += 1;
            continue;
        };
        if pu == dz {
            load.same_zone += 1;
            continue;
        }
        match (substrate.id_of(pu), substrate.id_of(dz)) {
            (Some(origin), Some(destination)) => load.requests.push(Request {
                origin,
                destination,
                issue_time: t,
            }),
            _ => load.unknown_zone += 1,
        }
    }
    load.requests.sort_by(|a, b| a.issue_time.total_cmp(&b.issue_time));
    if load.dropped() > 0 {
        log::warn!(
            "{}: dropped {} of {} rows ({} same zone, {} unknown zone, {} malformed)",
            path.display(),
            load.dropped(),
            load.rows,
            load.same_zone,
            load.unknown_zone,
            load.malformed
        );
    }
    Ok(load)
}
