//! Feasibility and earliest-arrival routing of trip requests through a [`Teg`].
//!
//! A journey walks from the origin to a boarding stop, rides one or more bus
//! edges, transferring only by waiting at a stop, then walks from the last
//! alighting stop to the destination. Routing scans ride edges in departure
//! order over the window `[start, horizon)`; every edge is labelled with the
//! best way to be aboard it, so the scan is exact for earliest arrival.
//!
//! Ties in arrival time are broken by fewer boardings, then by the
//! lexicographically smallest sequence of boarding stops.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::substrate::{StopId, SubstrateGraph};
use crate::teg::{BusId, TimeExpandedEdge, Teg};
use crate::{Error, Minutes, Result};

/// A trip demand `(origin, destination, issue time)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub origin: StopId,
    pub destination: StopId,
    pub issue_time: Minutes,
}

impl Request {
    pub fn new(origin: StopId, destination: StopId, issue_time: Minutes) -> Result<Self> {
        if origin == destination {
            return Err(Error::Validation(format!(
                "request origin and destination are both stop {origin}"
            )));
        }
        if !issue_time.is_finite() {
            return Err(Error::Validation("request issue time is not finite".into()));
        }
        Ok(Request {
            origin,
            destination,
            issue_time,
        })
    }
}

/// Walking legs at both ends of a journey.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkModel {
    pub speed_kmh: f64,
    /// Longest walk allowed at either end, in minutes. `None` means unbounded.
    pub max_minutes: Option<Minutes>,
}

impl WalkModel {
    pub fn new(speed_kmh: f64, max_minutes: Option<Minutes>) -> Self {
        WalkModel {
            speed_kmh,
            max_minutes,
        }
    }

    /// Walking time between two stops; zero when they coincide.
    pub fn minutes(&self, substrate: &SubstrateGraph, a: StopId, b: StopId) -> Minutes {
        if a == b {
            0.0
        } else {
            60.0 * substrate.distance_km(a, b) / self.speed_kmh
        }
    }

    /// Walking time if the walk is allowed.
    pub fn reach(&self, substrate: &SubstrateGraph, a: StopId, b: StopId) -> Option<Minutes> {
        if a == b {
            return Some(0.0);
        }
        if self.max_minutes == Some(0.0) {
            return None;
        }
        let m = self.minutes(substrate, a, b);
        match self.max_minutes {
            Some(cap) if m > cap => None,
            _ => Some(m),
        }
    }
}

/// Optional service caps applied to the earliest-arrival path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServicePolicy {
    pub max_wait: Option<Minutes>,
    pub max_transfers: Option<usize>,
}

impl ServicePolicy {
    pub fn is_unconstrained(&self) -> bool {
        self.max_wait.is_none() && self.max_transfers.is_none()
    }

    pub fn accepts(&self, path: &JourneyPath) -> bool {
        self.max_wait.is_none_or(|cap| path.total_wait() <= cap)
            && self.max_transfers.is_none_or(|cap| path.transfers() <= cap)
    }
}

/// A feasible journey through the time-expanded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct JourneyPath {
    pub origin: StopId,
    pub destination: StopId,
    pub issue_time: Minutes,
    /// Ride edges, with a wait edge wherever a transfer involves waiting.
    pub legs: Vec<TimeExpandedEdge>,
    pub arrival: Minutes,
    pub board_walk: Minutes,
    pub alight_walk: Minutes,
}

impl JourneyPath {
    pub fn rides(&self) -> impl Iterator<Item = &TimeExpandedEdge> {
        self.legs.iter().filter(|e| e.is_ride())
    }

    pub fn first_departure(&self) -> Minutes {
        self.rides().next().map_or(f64::NAN, |e| e.depart)
    }

    /// Indices into `legs` of rides that start a new boarding. Consecutive
    /// edges of the same bus chain with no wait in between form one boarding.
    fn boarding_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.legs.iter().enumerate().filter_map(|(i, e)| {
            let bus = e.bus()?;
            let continues = i > 0 && {
                let prev = &self.legs[i - 1];
                prev.bus() == Some(bus) && prev.arrive == e.depart && prev.to == e.from
            };
            (!continues).then_some(i)
        })
    }

    pub fn boardings(&self) -> usize {
        self.boarding_indices().count()
    }

    pub fn transfers(&self) -> usize {
        self.boardings().saturating_sub(1)
    }

    pub fn boarding_stops(&self) -> Vec<StopId> {
        self.boarding_indices().map(|i| self.legs[i].from).collect()
    }

    pub fn in_vehicle_time(&self) -> Minutes {
        self.rides().map(TimeExpandedEdge::duration).sum()
    }

    /// Wait at the first boarding stop, after walking there.
    pub fn initial_wait(&self) -> Minutes {
        self.first_departure() - (self.issue_time + self.board_walk)
    }

    /// Total time spent waiting between consecutive rides.
    pub fn transfer_wait(&self) -> Minutes {
        self.legs
            .windows(2)
            .map(|w| w[1].depart - w[0].arrive)
            .sum::<Minutes>()
            + self
                .legs
                .iter()
                .filter(|e| !e.is_ride())
                .map(TimeExpandedEdge::duration)
                .sum::<Minutes>()
    }

    pub fn total_wait(&self) -> Minutes {
        self.initial_wait() + self.transfer_wait()
    }
}

/// Checks the path conditions: the first ride is reachable on foot from the
/// origin in time, every ride exists in `teg`, consecutive legs chain at the
/// same stop in time order, and the endpoints and arrival are consistent.
pub fn validate_path(path: &JourneyPath, teg: &Teg, walk: &WalkModel) -> bool {
    let sub = teg.substrate();
    let (Some(first), Some(last)) = (path.legs.first(), path.legs.last()) else {
        return false;
    };
    if !first.is_ride() || !last.is_ride() {
        return false;
    }
    if [path.origin, path.destination, first.from, last.to]
        .iter()
        .any(|&s| !sub.contains(s))
    {
        return false;
    }
    match walk.reach(sub, path.origin, first.from) {
        Some(w) if w == path.board_walk => {}
        _ => return false,
    }
    if path.issue_time + path.board_walk > first.depart {
        return false;
    }
    for leg in &path.legs {
        let ok = match leg.kind {
            crate::teg::EdgeKind::Ride(_) => teg.contains_ride(leg),
            crate::teg::EdgeKind::Wait => leg.from == leg.to && leg.depart <= leg.arrive,
        };
        if !ok {
            return false;
        }
    }
    if path
        .legs
        .windows(2)
        .any(|w| w[0].to != w[1].from || w[0].arrive > w[1].depart)
    {
        return false;
    }
    match walk.reach(sub, last.to, path.destination) {
        Some(w) if w == path.alight_walk => {}
        _ => return false,
    }
    path.arrival == last.arrive + path.alight_walk
}

/// Ride edges of a [`Teg`] departing in `[start, horizon)`, sorted by departure.
///
/// Built once per graph version and reused for every request routed against it.
#[derive(Debug, Clone)]
pub struct Timetable<'a> {
    teg: &'a Teg,
    conns: Vec<TimeExpandedEdge>,
    /// Table index of the previous edge of the same bus, when that edge is in the window.
    prev_on_bus: Vec<Option<usize>>,
    start: Minutes,
    horizon: Minutes,
}

impl<'a> Timetable<'a> {
    pub fn new(teg: &'a Teg, start: Minutes, horizon: Minutes) -> Self {
        let mut keyed: Vec<(Minutes, usize, usize)> = Vec::new();
        // base[b] - lo[b] + k is the flat position of edge k of bus b
        let mut base = Vec::with_capacity(teg.fleet_size());
        let mut lows = Vec::with_capacity(teg.fleet_size());
        for (b, line) in teg.buses().iter().enumerate() {
            let edges = line.edges();
            let lo = edges.partition_point(|e| e.depart < start);
            let hi = edges.partition_point(|e| e.depart < horizon);
            base.push(keyed.len());
            lows.push(lo);
            keyed.extend((lo..hi).map(|k| (edges[k].depart, b, k)));
        }
        keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut slot = vec![0; keyed.len()];
        for (i, &(_, b, k)) in keyed.iter().enumerate() {
            slot[base[b] + k - lows[b]] = i;
        }
        let conns = keyed
            .iter()
            .map(|&(_, b, k)| teg.buses()[b].edges()[k])
            .collect();
        let prev_on_bus = keyed
            .iter()
            .map(|&(_, b, k)| (k > lows[b]).then(|| slot[base[b] + k - 1 - lows[b]]))
            .collect();
        Timetable {
            teg,
            conns,
            prev_on_bus,
            start,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }

    pub fn horizon(&self) -> Minutes {
        self.horizon
    }

    fn first_index(&self, start: Minutes) -> usize {
        debug_assert!(start >= self.start, "timetable window starts after the query");
        self.conns.partition_point(|c| c.depart < start)
    }

    fn walks(&self, req: &Request, walk: &WalkModel) -> (Vec<Option<Minutes>>, Vec<Option<Minutes>>) {
        let sub = self.teg.substrate();
        let board = sub.stop_ids().map(|s| walk.reach(sub, req.origin, s)).collect();
        let alight = sub.stop_ids().map(|s| walk.reach(sub, s, req.destination)).collect();
        (board, alight)
    }

    /// Earliest arrival time of `req` leaving no earlier than `start`.
    pub fn earliest_arrival_time(&self, req: &Request, start: Minutes, walk: &WalkModel) -> Option<Minutes> {
        self.scan_times(req, start, walk, false)
    }

    /// Whether any journey exists for `req` leaving no earlier than `start`.
    pub fn has_path(&self, req: &Request, start: Minutes, walk: &WalkModel) -> bool {
        self.scan_times(req, start, walk, true).is_some()
    }

    fn scan_times(&self, req: &Request, start: Minutes, walk: &WalkModel, any: bool) -> Option<Minutes> {
        let (board, alight) = self.walks(req, walk);
        let n = board.len();
        let mut earliest_at = vec![f64::INFINITY; n];
        let mut best = f64::INFINITY;
        for c in &self.conns[self.first_index(start)..] {
            if c.depart >= best {
                break;
            }
            let from = c.from.0;
            // on-board continuation implies earliest_at[from] <= depart, so this is exact
            let reachable = earliest_at[from] <= c.depart
                || board[from].is_some_and(|w| start + w <= c.depart);
            if !reachable {
                continue;
            }
            let to = c.to.0;
            if c.arrive < earliest_at[to] {
                earliest_at[to] = c.arrive;
            }
            if let Some(w) = alight[to] {
                best = best.min(c.arrive + w);
                if any {
                    break;
                }
            }
        }
        best.is_finite().then_some(best)
    }

    /// Earliest-arrival journey for `req` leaving no earlier than `start`.
    /// The journey keeps the request's own issue time.
    pub fn route(&self, req: &Request, start: Minutes, walk: &WalkModel) -> Option<JourneyPath> {
        let (board, alight) = self.walks(req, walk);
        let first = self.first_index(start);
        let m = self.conns.len();
        let mut labels: Vec<Option<(Label, Via)>> = vec![None; m];
        let mut alighted: Vec<Vec<usize>> = vec![Vec::new(); board.len()];
        let mut best: Option<(Minutes, Label, usize)> = None;

        for i in first..m {
            let c = self.conns[i];
            if best.as_ref().is_some_and(|b| c.depart >= b.0) {
                break;
            }
            let mut choice: Option<(Label, Via)> = None;
            let mut offer = |label: Label, via: Via| {
                if choice.as_ref().is_none_or(|(cur, _)| label < *cur) {
                    choice = Some((label, via));
                }
            };
            if let Some(p) = self.prev_on_bus[i] {
                if let Some((l, _)) = &labels[p] {
                    offer(l.clone(), Via::OnBoard(p));
                }
            }
            if board[c.from.0].is_some_and(|w| start + w <= c.depart) {
                offer(Label::first(c.from), Via::Walk);
            }
            for &j in &alighted[c.from.0] {
                if self.conns[j].arrive <= c.depart {
                    if let Some((l, _)) = &labels[j] {
                        offer(l.board(c.from), Via::Transfer(j));
                    }
                }
            }
            let Some((label, via)) = choice else { continue };
            if let Some(w) = alight[c.to.0] {
                let arrival = c.arrive + w;
                let better = match &best {
                    None => true,
                    Some((a, l, _)) => match arrival.total_cmp(a) {
                        Ordering::Less => true,
                        Ordering::Equal => label < *l,
                        Ordering::Greater => false,
                    },
                };
                if better {
                    best = Some((arrival, label.clone(), i));
                }
            }
            alighted[c.to.0].push(i);
            labels[i] = Some((label, via));
        }

        let (arrival, _, last) = best?;
        let mut legs = Vec::new();
        let mut cur = last;
        loop {
            legs.push(self.conns[cur]);
            match labels[cur].as_ref().map(|(_, v)| *v) {
                Some(Via::OnBoard(p)) => cur = p,
                Some(Via::Transfer(j)) => {
                    let (arr, dep) = (self.conns[j].arrive, self.conns[cur].depart);
                    if dep > arr {
                        legs.push(TimeExpandedEdge::wait(self.conns[cur].from, arr, dep));
                    }
                    cur = j;
                }
                Some(Via::Walk) | None => break,
            }
        }
        legs.reverse();
        let board_walk = board[legs[0].from.0].unwrap_or(0.0);
        let alight_walk = alight[self.conns[last].to.0].unwrap_or(0.0);
        Some(JourneyPath {
            origin: req.origin,
            destination: req.destination,
            issue_time: req.issue_time,
            legs,
            arrival,
            board_walk,
            alight_walk,
        })
    }
}

/// `(boardings, boarding stops)`, compared lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Label {
    boardings: u32,
    stops: Vec<StopId>,
}

impl Label {
    fn first(stop: StopId) -> Self {
        Label {
            boardings: 1,
            stops: vec![stop],
        }
    }

    fn board(&self, stop: StopId) -> Self {
        let mut stops = self.stops.clone();
        stops.push(stop);
        Label {
            boardings: self.boardings + 1,
            stops,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Via {
    OnBoard(usize),
    Walk,
    Transfer(usize),
}

/// Earliest-arrival journey for `req` among legs departing before `horizon`.
pub fn earliest_arrival(teg: &Teg, req: &Request, walk: &WalkModel, horizon: Minutes) -> Option<JourneyPath> {
    Timetable::new(teg, req.issue_time, horizon).route(req, req.issue_time, walk)
}

/// Whether `req` is served by the earliest-arrival path under the given caps.
pub fn is_served(
    teg: &Teg,
    req: &Request,
    walk: &WalkModel,
    horizon: Minutes,
    max_wait: Option<Minutes>,
    max_transfers: Option<usize>,
) -> bool {
    let policy = ServicePolicy {
        max_wait,
        max_transfers,
    };
    let table = Timetable::new(teg, req.issue_time, horizon);
    if policy.is_unconstrained() {
        table.has_path(req, req.issue_time, walk)
    } else {
        table
            .route(req, req.issue_time, walk)
            .is_some_and(|p| policy.accepts(&p))
    }
}

/// Serving rule shared by the online loop and by planner rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceRule {
    pub walk: WalkModel,
    pub policy: ServicePolicy,
}

impl ServiceRule {
    /// `false` when no journey starting at `start` can satisfy the wait cap.
    pub fn may_serve(&self, req: &Request, start: Minutes) -> bool {
        match (self.policy.max_wait, self.walk.max_minutes) {
            (Some(max_wait), Some(max_walk)) => start - req.issue_time - max_walk <= max_wait,
            _ => true,
        }
    }

    /// Earliest-arrival journey for `req` from `start`, if it satisfies the caps.
    pub fn serve(&self, table: &Timetable<'_>, req: &Request, start: Minutes) -> Option<JourneyPath> {
        if !self.may_serve(req, start) {
            return None;
        }
        table
            .route(req, start, &self.walk)
            .filter(|p| self.policy.accepts(p))
    }

    /// Same decision as [`ServiceRule::serve`] without materialising the path
    /// when no caps apply.
    pub fn servable(&self, table: &Timetable<'_>, req: &Request, start: Minutes) -> bool {
        if self.policy.is_unconstrained() {
            table.has_path(req, start, &self.walk)
        } else {
            self.serve(table, req, start).is_some()
        }
    }
}

impl ServiceRule {
    /// Re-routes every backlog request from `start`, removes the ones now
    /// served and returns them with their journeys. All of them start at the
    /// same instant, so requests sharing an origin-destination pair share one
    /// route computation.
    pub fn drain_backlog(
        &self,
        table: &Timetable<'_>,
        backlog: &mut Vec<Request>,
        start: Minutes,
    ) -> Vec<(Request, JourneyPath)> {
        let mut routes: HashMap<(StopId, StopId), Option<JourneyPath>> = HashMap::new();
        let mut served = Vec::new();
        backlog.retain(|r| {
            if !self.may_serve(r, start) {
                return true;
            }
            let route = routes
                .entry((r.origin, r.destination))
                .or_insert_with(|| table.route(r, start, &self.walk));
            let Some(path) = route else { return true };
            let mut path = path.clone();
            path.issue_time = r.issue_time;
            if self.policy.accepts(&path) {
                served.push((*r, path));
                false
            } else {
                true
            }
        });
        served
    }

    /// Like [`ServiceRule::drain_backlog`] but only counts.
    pub fn drain_backlog_count(&self, table: &Timetable<'_>, backlog: &mut Vec<Request>, start: Minutes) -> usize {
        if !self.policy.is_unconstrained() {
            return self.drain_backlog(table, backlog, start).len();
        }
        let mut found: HashMap<(StopId, StopId), bool> = HashMap::new();
        let before = backlog.len();
        backlog.retain(|r| {
            !*found
                .entry((r.origin, r.destination))
                .or_insert_with(|| table.has_path(r, start, &self.walk))
        });
        before - backlog.len()
    }
}

/// Bus of each ride leg, in order. Handy for reports and tests.
pub fn ride_buses(path: &JourneyPath) -> Vec<BusId> {
    path.rides().filter_map(TimeExpandedEdge::bus).collect()
}
