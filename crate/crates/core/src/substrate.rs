//! Static geography layer: candidate stops, straight-line distances and
//! travel-time weights between them.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Minutes, Result};

/// Mean Earth radius used by the haversine distance.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Dense index of a stop inside a [`SubstrateGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StopId(pub usize);

impl fmt::Display for StopId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Stop coordinates. Geographic positions use degrees, planar ones meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Geo { lat: f64, lon: f64 },
    Planar { x_m: f64, y_m: f64 },
}

impl Position {
    fn is_finite(&self) -> bool {
        match *self {
            Position::Geo { lat, lon } => lat.is_finite() && lon.is_finite(),
            Position::Planar { x_m, y_m } => x_m.is_finite() && y_m.is_finite(),
        }
    }

    fn same_mode(&self, other: &Position) -> bool {
        matches!(
            (self, other),
            (Position::Geo { .. }, Position::Geo { .. })
                | (Position::Planar { .. }, Position::Planar { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    /// External identifier (e.g. a taxi zone id).
    pub label: u32,
    pub position: Position,
}

impl Stop {
    pub fn geo(label: u32, lat: f64, lon: f64) -> Self {
        Stop {
            label,
            position: Position::Geo { lat, lon },
        }
    }

    pub fn planar(label: u32, x_m: f64, y_m: f64) -> Self {
        Stop {
            label,
            position: Position::Planar { x_m, y_m },
        }
    }
}

/// Straight-line distance in kilometers: haversine for geographic stops,
/// Euclidean for planar ones.
///
/// Panics if the two stops use different coordinate modes; a validated
/// [`SubstrateGraph`] never mixes them.
pub fn distance(a: &Stop, b: &Stop) -> f64 {
    match (a.position, b.position) {
        (Position::Planar { x_m: ax, y_m: ay }, Position::Planar { x_m: bx, y_m: by }) => {
            (ax - bx).hypot(ay - by) / 1000.0
        }
        (Position::Geo { lat: alat, lon: alon }, Position::Geo { lat: blat, lon: blon }) => {
            haversine_km(alat, alon, blat, blon)
        }
        _ => panic!("distance between stops with different coordinate modes"),
    }
}

fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Minutes needed to cover `distance_km` at `speed_kmh`.
pub fn minutes_for(distance_km: f64, speed_kmh: f64) -> Result<Minutes> {
    if !(speed_kmh > 0.0) || !speed_kmh.is_finite() {
        return Err(Error::Domain(format!("speed must be positive, got {speed_kmh}")));
    }
    Ok(60.0 * distance_km / speed_kmh)
}

/// Travel time between two stops in minutes at the given speed.
pub fn travel_time(a: &Stop, b: &Stop, speed_kmh: f64) -> Result<Minutes> {
    minutes_for(distance(a, b), speed_kmh)
}

/// Stops plus directed edges weighted by travel time in minutes.
#[derive(Debug, Clone)]
pub struct SubstrateGraph {
    stops: Vec<Stop>,
    /// Row-major `n x n` matrix; `None` means no edge.
    weights: Vec<Option<Minutes>>,
    by_label: HashMap<u32, StopId>,
}

impl SubstrateGraph {
    /// Complete directed graph (all ordered pairs but self-loops) weighted by
    /// straight-line travel time at `speed_kmh`.
    pub fn fully_connected(stops: Vec<Stop>, speed_kmh: f64) -> Result<Self> {
        if let Some(first) = stops.first() {
            if stops.iter().any(|s| !s.position.same_mode(&first.position)) {
                return Err(Error::Validation(
                    "stops mix geographic and planar coordinates".into(),
                ));
            }
        }
        let n = stops.len();
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    let w = travel_time(&stops[u], &stops[v], speed_kmh)?;
                    edges.push((StopId(u), StopId(v), w));
                }
            }
        }
        Self::with_edges(stops, edges)
    }

    /// Graph with an explicit edge list. Every edge needs a strictly positive weight.
    pub fn with_edges(
        stops: Vec<Stop>,
        edges: impl IntoIterator<Item = (StopId, StopId, Minutes)>,
    ) -> Result<Self> {
        if stops.len() < 2 {
            return Err(Error::Validation(format!(
                "a substrate graph needs at least 2 stops, got {}",
                stops.len()
            )));
        }
        let mut by_label = HashMap::with_capacity(stops.len());
        for (i, stop) in stops.iter().enumerate() {
            if !stop.position.is_finite() {
                return Err(Error::Validation(format!(
                    "stop {} has non-finite coordinates",
                    stop.label
                )));
            }
            if !stop.position.same_mode(&stops[0].position) {
                return Err(Error::Validation(
                    "stops mix geographic and planar coordinates".into(),
                ));
            }
            if by_label.insert(stop.label, StopId(i)).is_some() {
                return Err(Error::Validation(format!("duplicate stop id {}", stop.label)));
            }
        }
        let n = stops.len();
        let mut weights = vec![None; n * n];
        for (u, v, w) in edges {
            if u.0 >= n || v.0 >= n {
                return Err(Error::Validation(format!("edge ({u},{v}) references an unknown stop")));
            }
            if u == v {
                return Err(Error::Validation(format!("self-loop edge at stop {}", stops[u.0].label)));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Validation(format!(
                    "edge ({},{}) has non-positive weight {w}",
                    stops[u.0].label, stops[v.0].label
                )));
            }
            weights[u.0 * n + v.0] = Some(w);
        }
        Ok(SubstrateGraph {
            stops,
            weights,
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.stops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    pub fn stops(&self) -> &[Stop] {
        &self.stops
    }

    pub fn stop(&self, id: StopId) -> &Stop {
        &self.stops[id.0]
    }

    pub fn contains(&self, id: StopId) -> bool {
        id.0 < self.stops.len()
    }

    pub fn stop_ids(&self) -> impl Iterator<Item = StopId> {
        (0..self.stops.len()).map(StopId)
    }

    pub fn id_of(&self, label: u32) -> Option<StopId> {
        self.by_label.get(&label).copied()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.stops.iter().map(|s| s.label).collect()
    }

    /// Travel time of edge `(u, v)`, if the edge exists.
    pub fn weight(&self, u: StopId, v: StopId) -> Option<Minutes> {
        let n = self.stops.len();
        if u.0 >= n || v.0 >= n {
            return None;
        }
        self.weights[u.0 * n + v.0]
    }

    pub fn out_neighbors(&self, u: StopId) -> impl Iterator<Item = (StopId, Minutes)> + '_ {
        let n = self.stops.len();
        self.weights[u.0 * n..(u.0 + 1) * n]
            .iter()
            .enumerate()
            .filter_map(|(v, w)| w.map(|w| (StopId(v), w)))
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|w| w.is_some()).count()
    }

    pub fn distance_km(&self, u: StopId, v: StopId) -> f64 {
        distance(self.stop(u), self.stop(v))
    }
}

/// Column layout of a stops file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopFormat {
    /// `id,lat,lon`
    ZoneCentroid,
    /// `id,x_m,y_m`
    Planar,
}

impl StopFormat {
    fn from_header(header: &csv::StringRecord) -> Option<Self> {
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        match cols.as_slice() {
            ["id", "lat", "lon"] => Some(StopFormat::ZoneCentroid),
            ["id", "x_m", "y_m"] => Some(StopFormat::Planar),
            _ => None,
        }
    }
}

/// Reads a stops CSV. The format is taken from the header unless forced.
pub fn read_stops(path: &Path, format: Option<StopFormat>) -> Result<Vec<Stop>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let detected = StopFormat::from_header(&header);
    let format = match (format, detected) {
        (Some(f), Some(d)) if f != d => {
            return Err(parse_err(1, format!("header {header:?} does not match {f:?}")))
        }
        (Some(f), _) => f,
        (None, Some(d)) => d,
        (None, None) => {
            return Err(parse_err(
                1,
                format!("unrecognised header {header:?}; expected id,lat,lon or id,x_m,y_m"),
            ))
        }
    };

    let mut stops = Vec::new();
    let mut seen = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, got {}", record.len())));
        }
        let label: u32 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid stop id {:?}", &record[0])))?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("invalid coordinate {:?}", &record[i])))
        };
        let (a, b) = (num(1)?, num(2)?);
        if let Some(prev) = seen.insert(label, line) {
            return Err(Error::Validation(format!(
                "duplicate stop id {label} at lines {prev} and {line}"
            )));
        }
        stops.push(match format {
            StopFormat::ZoneCentroid => Stop::geo(label, a, b),
            StopFormat::Planar => Stop::planar(label, a, b),
        });
    }
    Ok(stops)
}

/// Loads a stops file into a fully connected substrate weighted at bus speed.
pub fn load_stops(path: &Path, format: Option<StopFormat>, bus_speed_kmh: f64) -> Result<SubstrateGraph> {
    SubstrateGraph::fully_connected(read_stops(path, format)?, bus_speed_kmh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn identical_stops_distance_zero() {
        let a = Stop::geo(1, 40.7, -74.0);
        assert_eq!(distance(&a, &a), 0.0);
        assert_eq!(travel_time(&a, &a, 17.3).unwrap(), 0.0);
    }

    #[test]
    fn haversine_reference_pair() {
        let a = Stop::geo(1, 40.7128, -74.0060);
        let b = Stop::geo(2, 40.7614, -73.9776);
        let d = distance(&a, &b);
        // reference evaluation with an independent haversine implementation
        assert!((d - 5.910120791863257).abs() < 1e-9);
        assert!((d - 5.93).abs() / 5.93 < 0.01);
        assert_eq!(d, distance(&b, &a));
    }

    #[test]
    fn planar_three_four_five() {
        let a = Stop::planar(0, 0.0, 0.0);
        let b = Stop::planar(1, 3000.0, 4000.0);
        assert_eq!(distance(&a, &b), 5.0);
    }

    #[test]
    fn travel_time_formula() {
        assert!((minutes_for(17.3, 17.3).unwrap() - 60.0).abs() < 1e-12);
        assert!((minutes_for(2.15, 4.3).unwrap() - 30.0).abs() < 1e-12);
        assert!(matches!(minutes_for(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(minutes_for(1.0, -3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn planar_triangle_weights() {
        // A(0,0), B(0,3km), C(4km,0): |BC| = 5 km
        let stops = vec![
            Stop::planar(0, 0.0, 0.0),
            Stop::planar(1, 0.0, 3000.0),
            Stop::planar(2, 4000.0, 0.0),
        ];
        let g = SubstrateGraph::fully_connected(stops, 60.0).unwrap();
        assert_eq!(g.edge_count(), 6);
        assert!((g.weight(StopId(1), StopId(2)).unwrap() - 5.0).abs() < 1e-12);
        assert!((g.weight(StopId(0), StopId(1)).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(g.weight(StopId(0), StopId(0)), None);
    }

    #[test]
    fn coincident_stops_rejected() {
        let stops = vec![Stop::planar(0, 10.0, 10.0), Stop::planar(1, 10.0, 10.0)];
        assert!(matches!(
            SubstrateGraph::fully_connected(stops, 17.3),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn explicit_edges_validated() {
        let stops = vec![Stop::planar(0, 0.0, 0.0), Stop::planar(1, 1.0, 0.0)];
        assert!(SubstrateGraph::with_edges(stops.clone(), [(StopId(0), StopId(0), 1.0)]).is_err());
        assert!(SubstrateGraph::with_edges(stops.clone(), [(StopId(0), StopId(5), 1.0)]).is_err());
        assert!(SubstrateGraph::with_edges(stops.clone(), [(StopId(0), StopId(1), 0.0)]).is_err());
        let g = SubstrateGraph::with_edges(stops, [(StopId(0), StopId(1), 2.5)]).unwrap();
        assert_eq!(g.out_neighbors(StopId(0)).collect::<Vec<_>>(), vec![(StopId(1), 2.5)]);
        assert_eq!(g.out_neighbors(StopId(1)).count(), 0);
    }

    #[test]
    fn load_planar_csv() {
        let f = write_tmp("id,x_m,y_m\n7,0,0\n8,0,3000\n9,4000,0\n");
        let g = load_stops(f.path(), None, 60.0).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edge_count(), 6);
        assert_eq!(g.id_of(9), Some(StopId(2)));
        assert!((g.weight(g.id_of(8).unwrap(), g.id_of(9).unwrap()).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn load_reports_line_of_malformed_row() {
        let f = write_tmp("id,lat,lon\n1,40.7,-74.0\n2,abc,-74.0\n");
        match read_stops(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let f = write_tmp("id,lat,lon\n1,40.7,-74.0\n1,40.8,-74.0\n");
        assert!(matches!(read_stops(f.path(), None), Err(Error::Validation(_))));
    }

    #[test]
    fn load_rejects_single_stop_and_bad_header() {
        let f = write_tmp("id,lat,lon\n1,40.7,-74.0\n");
        assert!(matches!(load_stops(f.path(), None, 17.3), Err(Error::Validation(_))));
        let f = write_tmp("zone,lat,lon\n1,40.7,-74.0\n");
        assert!(matches!(read_stops(f.path(), None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn manhattan_sized_graph_is_complete() {
        let stops: Vec<Stop> = (0..67)
            .map(|i| Stop::geo(i, 40.70 + 0.002 * i as f64, -74.01 + 0.001 * (i % 7) as f64))
            .collect();
        let g = SubstrateGraph::fully_connected(stops, 17.3).unwrap();
        assert_eq!(g.len(), 67);
        assert_eq!(g.edge_count(), 67 * 66);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn distance_symmetric(
                a in (-80.0f64..80.0, -179.0f64..179.0),
                b in (-80.0f64..80.0, -179.0f64..179.0),
                p in (-1e5f64..1e5, -1e5f64..1e5),
                q in (-1e5f64..1e5, -1e5f64..1e5),
            ) {
                let (ga, gb) = (Stop::geo(0, a.0, a.1), Stop::geo(1, b.0, b.1));
                let (d1, d2) = (distance(&ga, &gb), distance(&gb, &ga));
                prop_assert!(d1 >= 0.0);
                prop_assert!((d1 - d2).abs() <= 1e-9 * d1.max(1.0));
                let (pa, pb) = (Stop::planar(0, p.0, p.1), Stop::planar(1, q.0, q.1));
                prop_assert_eq!(distance(&pa, &pb), distance(&pb, &pa));
            }

            #[test]
            fn travel_time_monotone(d1 in 0.0f64..50.0, d2 in 0.0f64..50.0, s1 in 1.0f64..60.0, s2 in 1.0f64..60.0) {
                let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
                prop_assert!(minutes_for(lo, s1).unwrap() <= minutes_for(hi, s1).unwrap());
                let (slow, fast) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
                prop_assert!(minutes_for(d1, fast).unwrap() <= minutes_for(d1, slow).unwrap());
            }
        }
    }
}
