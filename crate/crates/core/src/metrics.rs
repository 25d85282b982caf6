//! Per-request records, aggregate summaries, ECDFs and binned heatmaps of a
//! finished run, plus their CSV emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::router::JourneyPath;
use crate::simulator::SimOutcome;
use crate::{Error, Minutes, Result};

const EPS: f64 = 1e-9;

/// Initial wait after walking to the boarding stop plus every transfer wait.
pub fn waiting_time(path: &JourneyPath) -> Result<Minutes> {
    let first = path.initial_wait();
    let transfers = path.transfer_wait();
    if first < -EPS || transfers < -EPS {
        return Err(Error::Domain(format!(
            "negative waiting component ({first}, {transfers})"
        )));
    }
    Ok((first + transfers).max(0.0))
}

pub fn in_vehicle_time(path: &JourneyPath) -> Minutes {
    path.in_vehicle_time()
}

/// In-vehicle time expressed as distance at `speed_kmh`, over the OD distance.
pub fn stretch(in_vehicle: Minutes, speed_kmh: f64, od_km: f64) -> Result<f64> {
    if !(od_km > 0.0) {
        return Err(Error::Domain(format!("OD distance {od_km} must be positive")));
    }
    Ok(in_vehicle / 60.0 * speed_kmh / od_km)
}

/// Mean number of passengers aboard a bus: `n_served / (fleet * t_sim) * avg_in_vehicle`.
pub fn average_occupation(n_served: u64, fleet: usize, t_sim: Minutes, avg_in_vehicle: Minutes) -> f64 {
    if n_served == 0 || fleet == 0 || t_sim <= 0.0 {
        return 0.0;
    }
    n_served as f64 / (fleet as f64 * t_sim) * avg_in_vehicle
}

/// Right-continuous empirical CDF as `(value, fraction <= value)` steps.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Domain("ECDF of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match steps.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => steps.push((x, frac)),
        }
    }
    Ok(steps)
}

/// Evaluates an ECDF produced by [`ecdf`].
pub fn ecdf_at(steps: &[(f64, f64)], x: f64) -> f64 {
    let k = steps.partition_point(|s| s.0 <= x);
    if k == 0 {
        0.0
    } else {
        steps[k - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub origin: u32,
    pub destination: u32,
    pub issue_time: Minutes,
    pub od_km: f64,
    pub served: bool,
    pub serve_time: Option<Minutes>,
    pub first_departure: Option<Minutes>,
    pub arrival: Option<Minutes>,
    pub board_walk: Option<Minutes>,
    pub alight_walk: Option<Minutes>,
    pub waiting: Option<Minutes>,
    pub in_vehicle: Option<Minutes>,
    pub transfers: Option<usize>,
    pub stretch_car: Option<f64>,
    pub stretch_walk: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatQuantity {
    InVehicle,
    Transfers,
}

/// Cell `(i, j)`: served requests in OD bin `i` with quantity in bin `j`,
/// over all requests issued in OD bin `i`. The last bins absorb larger values.
pub fn heatmap_bins(
    records: &[RequestRecord],
    od_bin_km: f64,
    quantity_bin: f64,
    n_bins: usize,
    quantity: HeatQuantity,
) -> Vec<Vec<f64>> {
    let bin = |x: f64, w: f64| ((x / w).floor().max(0.0) as usize).min(n_bins - 1);
    let mut cells = vec![vec![0.0; n_bins]; n_bins];
    let mut totals = vec![0usize; n_bins];
    for r in records {
        let i = bin(r.od_km, od_bin_km);
        totals[i] += 1;
        if !r.served {
            continue;
        }
        let q = match quantity {
            HeatQuantity::InVehicle => r.in_vehicle,
            HeatQuantity::Transfers => r.transfers.map(|t| t as f64),
        };
        if let Some(q) = q {
            cells[i][bin(q, quantity_bin)] += 1.0;
        }
    }
    for (row, &n) in cells.iter_mut().zip(&totals) {
        if n > 0 {
            row.iter_mut().for_each(|c| *c /= n as f64);
        }
    }
    cells
}

/// Aggregate table of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fleet_size: usize,
    pub issued: u64,
    pub served: u64,
    pub unserved: u64,
    pub reward: u64,
    /// `None` when nothing was issued.
    pub service_rate: Option<f64>,
    pub avg_waiting: Option<f64>,
    pub avg_in_vehicle: Option<f64>,
    pub avg_walking: Option<f64>,
    pub avg_stretch_car: Option<f64>,
    pub avg_stretch_walk: Option<f64>,
    pub avg_transfers: Option<f64>,
    pub average_occupation: f64,
    pub t_sim: Minutes,
    pub decisions: u64,
    pub ride_edges: usize,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub records: Vec<RequestRecord>,
    pub unserved_series: Vec<(Minutes, usize)>,
    /// Length in km of every ride edge.
    pub spacing_km: Vec<f64>,
    pub summary: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl SimReport {
    pub fn from_outcome(out: &SimOutcome) -> Result<Self> {
        let sub = out.substrate.as_ref();
        let cfg = &out.config;
        let mut records = Vec::with_capacity(out.served.len() + out.unserved.len());
        for s in &out.served {
            let r = &s.request;
            let od_km = sub.distance_km(r.origin, r.destination);
            let in_vehicle = in_vehicle_time(&s.path);
            records.push(RequestRecord {
                origin: sub.stop(r.origin).label,
                destination: sub.stop(r.destination).label,
                issue_time: r.issue_time,
                od_km,
                served: true,
                serve_time: Some(s.serve_time),
                first_departure: Some(s.path.first_departure()),
                arrival: Some(s.path.arrival),
                board_walk: Some(s.path.board_walk),
                alight_walk: Some(s.path.alight_walk),
                waiting: Some(waiting_time(&s.path)?),
                in_vehicle: Some(in_vehicle),
                transfers: Some(s.path.transfers()),
                stretch_car: Some(stretch(in_vehicle, cfg.car_speed_kmh, od_km)?),
                stretch_walk: Some(stretch(in_vehicle, cfg.walk_speed_kmh, od_km)?),
            });
        }
        for r in &out.unserved {
            records.push(RequestRecord {
                origin: sub.stop(r.origin).label,
                destination: sub.stop(r.destination).label,
                issue_time: r.issue_time,
                od_km: sub.distance_km(r.origin, r.destination),
                served: false,
                serve_time: None,
                first_departure: None,
                arrival: None,
                board_walk: None,
                alight_walk: None,
                waiting: None,
                in_vehicle: None,
                transfers: None,
                stretch_car: None,
                stretch_walk: None,
            });
        }
        records.sort_by(|a, b| a.issue_time.total_cmp(&b.issue_time));

        let served: Vec<&RequestRecord> = records.iter().filter(|r| r.served).collect();
        let avg = |f: fn(&RequestRecord) -> Option<f64>| mean(served.iter().filter_map(|r| f(r)));
        let avg_in_vehicle = avg(|r| r.in_vehicle);
        let n_served = served.len() as u64;
        let summary = Summary {
            fleet_size: cfg.fleet_size,
            issued: out.issued,
            served: n_served,
            unserved: out.unserved.len() as u64,
            reward: out.reward,
            service_rate: (out.issued > 0).then(|| n_served as f64 / out.issued as f64),
            avg_waiting: avg(|r| r.waiting),
            avg_in_vehicle,
            avg_walking: avg(|r| Some(r.board_walk? + r.alight_walk?)),
            avg_stretch_car: avg(|r| r.stretch_car),
            avg_stretch_walk: avg(|r| r.stretch_walk),
            avg_transfers: avg(|r| r.transfers.map(|t| t as f64)),
            average_occupation: average_occupation(n_served, cfg.fleet_size, out.t_sim, avg_in_vehicle.unwrap_or(0.0)),
            t_sim: out.t_sim,
            decisions: out.decisions,
            ride_edges: out.teg.edge_count(),
        };
        let spacing_km = out.teg.ride_edges().map(|e| sub.distance_km(e.from, e.to)).collect();
        Ok(SimReport {
            records,
            unserved_series: out.unserved_series.clone(),
            spacing_km,
            summary,
        })
    }

    /// Writes `requests.csv`, `unserved_timeseries.csv`, the ECDF and heatmap CSVs into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_err = |path: &Path| {
            let path = path.to_path_buf();
            move |e: csv::Error| Error::Format(format!("{}: {e}", path.display()))
        };

        let path = dir.join("requests.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err(&path))?;
        }
        if self.records.is_empty() {
            w.write_record([
                "origin",
                "destination",
                "issue_time",
                "od_km",
                "served",
                "serve_time",
                "first_departure",
                "arrival",
                "board_walk",
                "alight_walk",
                "waiting",
                "in_vehicle",
                "transfers",
                "stretch_car",
                "stretch_walk",
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        write_rows(&dir.join("unserved_timeseries.csv"), &["t", "unserved"], self.unserved_series.iter().map(|&(t, n)| vec![t.to_string(), n.to_string()]))?;

        let waits: Vec<f64> = self.records.iter().filter_map(|r| r.waiting).collect();
        for (name, values) in [("ecdf_waiting.csv", waits), ("ecdf_spacing.csv", self.spacing_km.clone())] {
            let steps = if values.is_empty() { Vec::new() } else { ecdf(&values)? };
            write_rows(&dir.join(name), &["value", "fraction"], steps.iter().map(|&(v, f)| vec![v.to_string(), f.to_string()]))?;
        }

        for (name, q, width) in [
            ("heatmap_in_vehicle.csv", HeatQuantity::InVehicle, 20.0),
            ("heatmap_transfers.csv", HeatQuantity::Transfers, 1.0),
        ] {
            let cells = heatmap_bins(&self.records, 2.0, width, 5, q);
            let header: Vec<String> = std::iter::once("od_bin".to_string())
                .chain((0..5).map(|j| format!("q{j}")))
                .collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_rows(
                &dir.join(name),
                &header,
                cells.iter().enumerate().map(|(i, row)| {
                    std::iter::once(i.to_string()).chain(row.iter().map(f64::to_string)).collect()
                }),
            )?;
        }
        Ok(())
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
