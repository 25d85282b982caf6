//! The time-expanded graph under construction.
//!
//! Each bus owns a chain of ride edges. A bus departs a stop the instant it
//! arrives there, so edge `k + 1` of a chain leaves from the arrival stop of
//! edge `k` at exactly its arrival time. Waiting edges are never stored: they
//! are derived from the bus events at a stop, which keeps them consistent
//! with the ride edges by construction.
//!
//! The graph only grows. [`Teg::append_edge`] extends the chain of one bus
//! and never touches existing edges.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::substrate::{StopId, SubstrateGraph};
use crate::{Error, Minutes, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BusId(pub usize);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Ride(BusId),
    Wait,
}

/// A timed transition `from -> to` leaving at `depart` and arriving at `arrive`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeExpandedEdge {
    pub from: StopId,
    pub to: StopId,
    pub depart: Minutes,
    pub arrive: Minutes,
    pub kind: EdgeKind,
}

impl TimeExpandedEdge {
    pub fn ride(bus: BusId, from: StopId, to: StopId, depart: Minutes, arrive: Minutes) -> Self {
        TimeExpandedEdge {
            from,
            to,
            depart,
            arrive,
            kind: EdgeKind::Ride(bus),
        }
    }

    pub fn wait(stop: StopId, depart: Minutes, arrive: Minutes) -> Self {
        TimeExpandedEdge {
            from: stop,
            to: stop,
            depart,
            arrive,
            kind: EdgeKind::Wait,
        }
    }

    pub fn bus(&self) -> Option<BusId> {
        match self.kind {
            EdgeKind::Ride(b) => Some(b),
            EdgeKind::Wait => None,
        }
    }

    pub fn is_ride(&self) -> bool {
        matches!(self.kind, EdgeKind::Ride(_))
    }

    pub fn duration(&self) -> Minutes {
        self.arrive - self.depart
    }
}

/// Schedule of one bus: its placement and the chain of ride edges built so far.
#[derive(Debug, Clone)]
pub struct BusSubgraph {
    bus: BusId,
    origin: StopId,
    start: Minutes,
    edges: Arc<Vec<TimeExpandedEdge>>,
}

impl BusSubgraph {
    pub fn bus(&self) -> BusId {
        self.bus
    }

    /// Stop where the bus was placed.
    pub fn origin(&self) -> StopId {
        self.origin
    }

    pub fn start(&self) -> Minutes {
        self.start
    }

    pub fn edges(&self) -> &[TimeExpandedEdge] {
        &self.edges
    }

    /// Arrival stop of the last edge, or the placement stop for an empty schedule.
    pub fn terminal(&self) -> StopId {
        self.edges.last().map_or(self.origin, |e| e.to)
    }

    /// Arrival time of the last edge (`tau`), or the placement time for an empty schedule.
    pub fn tau(&self) -> Minutes {
        self.edges.last().map_or(self.start, |e| e.arrive)
    }
}

#[derive(Debug, Clone)]
pub struct Teg {
    substrate: Arc<SubstrateGraph>,
    buses: Vec<BusSubgraph>,
    built_until: Minutes,
}

impl Teg {
    /// A graph with one bus per placement `(stop, time)` and no ride edges yet.
    pub fn new(substrate: Arc<SubstrateGraph>, placements: &[(StopId, Minutes)]) -> Result<Self> {
        if placements.is_empty() {
            return Err(Error::Domain("fleet is empty".into()));
        }
        let buses = placements
            .iter()
            .enumerate()
            .map(|(i, &(stop, start))| {
                if !substrate.contains(stop) {
                    return Err(Error::Domain(format!("unknown stop {stop}")));
                }
                Ok(BusSubgraph {
                    bus: BusId(i),
                    origin: stop,
                    start,
                    edges: Arc::new(Vec::new()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut teg = Teg {
            substrate,
            buses,
            built_until: 0.0,
        };
        teg.built_until = teg.min_tau();
        Ok(teg)
    }

    pub fn substrate(&self) -> &SubstrateGraph {
        &self.substrate
    }

    pub fn substrate_arc(&self) -> &Arc<SubstrateGraph> {
        &self.substrate
    }

    pub fn buses(&self) -> &[BusSubgraph] {
        &self.buses
    }

    pub fn bus(&self, bus: BusId) -> Option<&BusSubgraph> {
        self.buses.get(bus.0)
    }

    pub fn fleet_size(&self) -> usize {
        self.buses.len()
    }

    /// `min_i tau_i`: every bus schedule is complete up to this instant.
    pub fn built_until(&self) -> Minutes {
        self.built_until
    }

    fn min_tau(&self) -> Minutes {
        self.buses
            .iter()
            .map(BusSubgraph::tau)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn ride_edges(&self) -> impl Iterator<Item = &TimeExpandedEdge> {
        self.buses.iter().flat_map(|b| b.edges.iter())
    }

    pub fn edge_count(&self) -> usize {
        self.buses.iter().map(|b| b.edges.len()).sum()
    }

    /// Whether `edge` is one of the ride edges of this graph.
    pub fn contains_ride(&self, edge: &TimeExpandedEdge) -> bool {
        let Some(bus) = edge.bus().and_then(|b| self.bus(b)) else {
            return false;
        };
        let edges = bus.edges();
        let i = edges.partition_point(|e| e.depart < edge.depart);
        edges[i..]
            .iter()
            .take_while(|e| e.depart == edge.depart)
            .any(|e| e == edge)
    }

    /// Extends `bus` with a ride edge to `next_stop`, departing when and where
    /// the bus last arrives. Returns the new edge.
    pub fn append_edge(&mut self, bus: BusId, next_stop: StopId) -> Result<TimeExpandedEdge> {
        let Some(line) = self.buses.get_mut(bus.0) else {
            return Err(Error::Domain(format!("unknown bus {bus}")));
        };
        if !self.substrate.contains(next_stop) {
            return Err(Error::Domain(format!("unknown stop {next_stop}")));
        }
        let from = line.terminal();
        if from == next_stop {
            return Err(Error::Domain(format!(
                "bus {bus} is already at stop {next_stop}; self-loop rides are not allowed"
            )));
        }
        let Some(w) = self.substrate.weight(from, next_stop) else {
            return Err(Error::Domain(format!("no substrate edge ({from},{next_stop})")));
        };
        let depart = line.tau();
        let edge = TimeExpandedEdge::ride(bus, from, next_stop, depart, depart + w);
        Arc::make_mut(&mut line.edges).push(edge);
        self.built_until = self.min_tau();
        Ok(edge)
    }

    /// Persistent-style append: returns a new version, leaving `self` untouched.
    pub fn with_edge(&self, bus: BusId, next_stop: StopId) -> Result<Teg> {
        let mut next = self.clone();
        next.append_edge(bus, next_stop)?;
        Ok(next)
    }

    /// Waiting edges at `stop`, derived from bus events there. Every event time
    /// (arrival or departure) is linked to the next strictly later departure.
    pub fn wait_edges_at(&self, stop: StopId) -> Vec<TimeExpandedEdge> {
        let mut events = Vec::new();
        let mut departures = Vec::new();
        for e in self.ride_edges() {
            if e.from == stop {
                events.push(e.depart);
                departures.push(e.depart);
            }
            if e.to == stop {
                events.push(e.arrive);
            }
        }
        events.sort_by(f64::total_cmp);
        events.dedup();
        departures.sort_by(f64::total_cmp);
        departures.dedup();
        events
            .into_iter()
            .filter_map(|t| {
                let i = departures.partition_point(|&d| d <= t);
                departures.get(i).map(|&d| TimeExpandedEdge::wait(stop, t, d))
            })
            .collect()
    }

    /// The bus whose line must be extended next: `argmin_i tau_i`, ties broken
    /// uniformly at random.
    pub fn frontier_bus<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(BusId, Minutes)> {
        let tau = self.built_until;
        let tied: Vec<BusId> = self
            .buses
            .iter()
            .filter(|b| b.tau() == tau)
            .map(|b| b.bus)
            .collect();
        match tied.len() {
            0 => Err(Error::Domain("fleet is empty".into())),
            1 => Ok((tied[0], tau)),
            k => Ok((tied[rng.gen_range(0..k)], tau)),
        }
    }

    /// Candidate next stops for `bus` at action instant `now`: all substrate
    /// out-neighbours of its terminal stop, optionally capped to the nearest
    /// `max_candidates` by travel time.
    pub fn action_set(
        &self,
        bus: BusId,
        now: Minutes,
        buffer: Minutes,
        max_candidates: Option<usize>,
    ) -> Result<Vec<StopId>> {
        let line = self
            .bus(bus)
            .ok_or_else(|| Error::Domain(format!("unknown bus {bus}")))?;
        if line.tau() != self.built_until {
            return Err(Error::Contract(format!(
                "bus {bus} is not a frontier bus (tau {} > {})",
                line.tau(),
                self.built_until
            )));
        }
        if line.tau() - buffer != now {
            return Err(Error::Contract(format!(
                "t = {now} is not an action instant (tau - B = {})",
                line.tau() - buffer
            )));
        }
        let terminal = line.terminal();
        let mut candidates: Vec<(StopId, Minutes)> = self
            .substrate
            .out_neighbors(terminal)
            .filter(|&(v, _)| v != terminal)
            .collect();
        if let Some(cap) = max_candidates {
            if cap < candidates.len() {
                candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                candidates.truncate(cap);
                candidates.sort_by_key(|c| c.0);
            }
        }
        Ok(candidates.into_iter().map(|(v, _)| v).collect())
    }

    /// Line-oriented snapshot `bus_id,from,to,depart,arrive` using stop labels,
    /// ordered by bus then departure.
    pub fn snapshot_text(&self) -> String {
        let mut out = String::from("bus_id,from,to,depart,arrive\n");
        for line in &self.buses {
            for e in line.edges() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    line.bus,
                    self.substrate.stop(e.from).label,
                    self.substrate.stop(e.to).label,
                    e.depart,
                    e.arrive
                );
            }
        }
        out
    }
}
