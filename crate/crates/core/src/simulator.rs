//! The event-driven online loop.
//!
//! The clock jumps between two kinds of events: request arrivals from the
//! stream and action instants, which occur when the earliest line end is
//! exactly `buffer` minutes ahead. A request is checked against the current
//! graph on arrival; at an action instant the planner extends the frontier
//! bus by one edge and the backlog of unserved requests is checked again.
//! A request arriving at the same instant as an action is processed first.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::planner::{Dynamics, MctsParams, Planner, PlanningState};
use crate::router::{JourneyPath, Request, ServicePolicy, ServiceRule, Timetable, WalkModel};
use crate::substrate::{StopId, SubstrateGraph};
use crate::teg::{TimeExpandedEdge, Teg};
use crate::{seeded_rng, Error, Minutes, Result, SimRng};

/// Planner streams are derived from the run seed with this offset, so the
/// initial network and arrivals do not depend on which planner runs.
const PLANNER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub fleet_size: usize,
    pub buffer: Minutes,
    pub bus_speed_kmh: f64,
    pub car_speed_kmh: f64,
    pub walk_speed_kmh: f64,
    /// Longest walk at either end of a journey; `None` is unbounded.
    pub max_walk: Option<Minutes>,
    pub start: Minutes,
    /// `None` runs until the request stream is exhausted.
    pub end: Option<Minutes>,
    pub max_wait: Option<Minutes>,
    pub max_transfers: Option<usize>,
    pub seed: u64,
    pub max_candidates: Option<usize>,
    pub mcts: MctsParams,
    /// Emit a progress record every this many simulated minutes.
    pub progress_every: Option<Minutes>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            fleet_size: 5,
            buffer: 30.0,
            bus_speed_kmh: 17.3,
            car_speed_kmh: 11.4,
            walk_speed_kmh: 4.3,
            max_walk: Some(0.0),
            start: 0.0,
            end: Some(240.0),
            max_wait: None,
            max_transfers: None,
            seed: 42,
            max_candidates: None,
            mcts: MctsParams::default(),
            progress_every: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.fleet_size == 0 {
            return bad("fleet size must be at least 1".into());
        }
        if !(self.buffer.is_finite() && self.buffer >= 0.0) {
            return bad(format!("buffer {} must be non-negative", self.buffer));
        }
        for (name, v) in [
            ("bus", self.bus_speed_kmh),
            ("car", self.car_speed_kmh),
            ("walk", self.walk_speed_kmh),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} speed {v} must be positive"));
            }
        }
        if !self.start.is_finite() {
            return bad("start time is not finite".into());
        }
        if let Some(end) = self.end {
            if !(end > self.start) {
                return bad(format!("end {end} must be after start {}", self.start));
            }
        }
        if self.max_walk.is_some_and(|w| !(w >= 0.0)) || self.max_wait.is_some_and(|w| !(w >= 0.0)) {
            return bad("walking and waiting caps must be non-negative".into());
        }
        if self.max_candidates == Some(0) {
            return bad("candidate cap must be at least 1".into());
        }
        if self.progress_every.is_some_and(|p| !(p > 0.0)) {
            return bad("progress interval must be positive".into());
        }
        self.mcts.validate()
    }

    pub fn walk(&self) -> WalkModel {
        WalkModel::new(self.walk_speed_kmh, self.max_walk)
    }

    pub fn dynamics(&self) -> Dynamics {
        Dynamics {
            buffer: self.buffer,
            rule: ServiceRule {
                walk: self.walk(),
                policy: ServicePolicy {
                    max_wait: self.max_wait,
                    max_transfers: self.max_transfers,
                },
            },
            max_candidates: self.max_candidates,
        }
    }

    /// Seed of the planner's random stream.
    pub fn planner_seed(&self) -> u64 {
        self.seed ^ PLANNER_STREAM
    }
}

/// Requests in non-decreasing issue-time order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStream {
    requests: Vec<Request>,
}

impl EventStream {
    pub fn new(requests: Vec<Request>) -> Result<Self> {
        if let Some(i) = requests.iter().position(|r| !r.issue_time.is_finite()) {
            return Err(Error::Validation(format!("request {i} has a non-finite issue time")));
        }
        if let Some(i) = requests.windows(2).position(|w| w[1].issue_time < w[0].issue_time) {
            return Err(Error::Validation(format!(
                "request stream is not sorted at position {}",
                i + 1
            )));
        }
        Ok(EventStream { requests })
    }

    pub fn sorted(mut requests: Vec<Request>) -> Result<Self> {
        requests.sort_by(|a, b| a.issue_time.total_cmp(&b.issue_time));
        Self::new(requests)
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedRecord {
    pub request: Request,
    pub path: JourneyPath,
    pub serve_time: Minutes,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub now: Minutes,
    pub teg: Teg,
    /// Backlog in arrival order.
    pub unserved: Vec<Request>,
    pub served: Vec<ServedRecord>,
    pub reward: u64,
    pub issued: u64,
}

/// Counters of invariant checks done while running.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub appends: u64,
    pub lookahead_violations: u64,
    pub clock_regressions: u64,
    pub conservation_violations: u64,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.lookahead_violations == 0 && self.clock_regressions == 0 && self.conservation_violations == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub t: Minutes,
    pub reward: u64,
    pub unserved: usize,
    pub fleet: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Request { request: Request, served: bool },
    Action { now: Minutes, edge: TimeExpandedEdge, backlog_served: usize },
}

/// Hooks into a run. Every method has an empty default.
pub trait SimObserver {
    fn on_event(&mut self, _event: &Event) {}

    /// Called for every edge the planner appends, with the clock and buffer
    /// at that moment.
    fn on_append(&mut self, _now: Minutes, _buffer: Minutes, _edge: &TimeExpandedEdge) {}

    fn on_progress(&mut self, _progress: &Progress) {}
}

/// Observer that ignores everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoObserver;

impl SimObserver for NoObserver {}

/// Writes progress records as newline-delimited JSON.
pub struct NdjsonProgress<W: std::io::Write>(pub W);

impl<W: std::io::Write> SimObserver for NdjsonProgress<W> {
    fn on_progress(&mut self, progress: &Progress) {
        if let Ok(line) = serde_json::to_string(progress) {
            let _ = writeln!(self.0, "{line}");
        }
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub config: SimConfig,
    pub substrate: Arc<SubstrateGraph>,
    pub teg: Teg,
    pub served: Vec<ServedRecord>,
    pub unserved: Vec<Request>,
    pub reward: u64,
    pub issued: u64,
    /// `(time, backlog size)` after each event, one point per timestamp.
    pub unserved_series: Vec<(Minutes, usize)>,
    pub audit: Audit,
    pub decisions: u64,
    /// Simulated span, `end - start` or up to the last event in endless mode.
    pub t_sim: Minutes,
}

/// Places every bus at a uniformly random stop at `start` and extends each
/// line with random edges until it reaches `start + buffer`.
pub fn initialize(config: &SimConfig, substrate: Arc<SubstrateGraph>, rng: &mut SimRng) -> Result<SimState> {
    config.validate()?;
    let placements: Vec<(StopId, Minutes)> = (0..config.fleet_size)
        .map(|_| (StopId(rng.gen_range(0..substrate.len())), config.start))
        .collect();
    let mut teg = Teg::new(substrate.clone(), &placements)?;
    let target = config.start + config.buffer;
    for b in 0..config.fleet_size {
        let bus = crate::teg::BusId(b);
        while teg.buses()[b].tau() < target {
            let here = teg.buses()[b].terminal();
            let next: Vec<StopId> = substrate.out_neighbors(here).map(|(v, _)| v).collect();
            let &v = next
                .choose(rng)
                .ok_or_else(|| Error::Domain(format!("stop {here} has no outgoing edge")))?;
            teg.append_edge(bus, v)?;
        }
    }
    Ok(SimState {
        now: config.start,
        teg,
        unserved: Vec::new(),
        served: Vec::new(),
        reward: 0,
        issued: 0,
    })
}

/// A run in progress.
pub struct Simulation {
    config: SimConfig,
    dynamics: Dynamics,
    substrate: Arc<SubstrateGraph>,
    state: SimState,
    rng: SimRng,
    planner_rng: SimRng,
    audit: Audit,
    series: Vec<(Minutes, usize)>,
    decisions: u64,
    next_progress: Option<Minutes>,
}

impl Simulation {
    pub fn new(config: SimConfig, substrate: Arc<SubstrateGraph>) -> Result<Self> {
        let mut rng = seeded_rng(config.seed);
        let state = initialize(&config, substrate.clone(), &mut rng)?;
        let next_progress = config.progress_every.map(|p| config.start + p);
        Ok(Simulation {
            dynamics: config.dynamics(),
            planner_rng: seeded_rng(config.planner_seed()),
            substrate,
            state,
            rng,
            audit: Audit::default(),
            series: vec![(config.start, 0)],
            decisions: 0,
            next_progress,
            config,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn audit(&self) -> &Audit {
        &self.audit
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Next instant at which the earliest line end is `buffer` minutes ahead.
    pub fn next_action_instant(&self) -> Minutes {
        self.dynamics.next_instant(&self.state.teg)
    }

    fn advance_clock(&mut self, t: Minutes) {
        if t < self.state.now {
            self.audit.clock_regressions += 1;
        }
        self.state.now = t;
    }

    fn after_event(&mut self, observer: &mut dyn SimObserver) {
        let s = &self.state;
        if s.issued != (s.served.len() + s.unserved.len()) as u64 || s.reward != s.served.len() as u64 {
            self.audit.conservation_violations += 1;
        }
        let point = (s.now, s.unserved.len());
        match self.series.last_mut() {
            Some(last) if last.0 == point.0 => *last = point,
            _ => self.series.push(point),
        }
        while let Some(due) = self.next_progress.filter(|&due| due <= s.now) {
            observer.on_progress(&Progress {
                t: due,
                reward: s.reward,
                unserved: s.unserved.len(),
                fleet: self.config.fleet_size,
            });
            self.next_progress = Some(due + self.config.progress_every.unwrap_or(f64::INFINITY));
        }
    }

    /// Checks `req` against the current graph at its issue time.
    pub fn handle_request(&mut self, req: Request, observer: &mut dyn SimObserver) -> Result<bool> {
        if !(self.substrate.contains(req.origin) && self.substrate.contains(req.destination)) {
            return Err(Error::Validation(format!(
                "request {} -> {} references an unknown stop",
                req.origin, req.destination
            )));
        }
        self.advance_clock(req.issue_time);
        let now = self.state.now;
        let teg = &self.state.teg;
        let table = Timetable::new(teg, now, teg.built_until());
        let path = self.dynamics.rule.serve(&table, &req, now);
        self.state.issued += 1;
        let served = path.is_some();
        match path {
            Some(path) => {
                self.state.reward += 1;
                self.state.served.push(ServedRecord {
                    request: req,
                    path,
                    serve_time: now,
                });
            }
            None => self.state.unserved.push(req),
        }
        observer.on_event(&Event::Request { request: req, served });
        self.after_event(observer);
        Ok(served)
    }

    /// Lets `planner` extend the frontier bus, then re-checks the backlog.
    pub fn handle_action_instant(&mut self, planner: &mut dyn Planner, observer: &mut dyn SimObserver) -> Result<TimeExpandedEdge> {
        let now = self.next_action_instant();
        self.advance_clock(now);
        let (frontier, _) = self.state.teg.frontier_bus(&mut self.rng)?;
        let action = planner.plan(
            &PlanningState {
                now,
                teg: &self.state.teg,
                unserved: &self.state.unserved,
                frontier,
                dynamics: &self.dynamics,
            },
            &mut self.planner_rng,
        )?;
        let edge = self.state.teg.append_edge(frontier, action)?;
        self.decisions += 1;
        self.audit.appends += 1;
        if edge.depart - self.config.buffer != now {
            self.audit.lookahead_violations += 1;
        }
        observer.on_append(now, self.config.buffer, &edge);

        let teg = &self.state.teg;
        let table = Timetable::new(teg, now, teg.built_until());
        let newly = self.dynamics.rule.drain_backlog(&table, &mut self.state.unserved, now);
        let backlog_served = newly.len();
        self.state.reward += backlog_served as u64;
        self.state.served.extend(newly.into_iter().map(|(request, path)| ServedRecord {
            request,
            path,
            serve_time: now,
        }));
        observer.on_event(&Event::Action {
            now,
            edge,
            backlog_served,
        });
        self.after_event(observer);
        Ok(edge)
    }

    /// Runs the loop over `stream` until the end time, or until the stream is
    /// exhausted when no end is set.
    pub fn run(mut self, stream: &EventStream, planner: &mut dyn Planner, observer: &mut dyn SimObserver) -> Result<SimOutcome> {
        if let Some(r) = stream.requests().first().filter(|r| r.issue_time < self.config.start) {
            return Err(Error::Validation(format!(
                "request issued at {} before the start {}",
                r.issue_time, self.config.start
            )));
        }
        let end = self.config.end;
        let mut pending = stream.requests().iter().peekable();
        loop {
            let t_act = self.next_action_instant();
            let next_req = pending.peek().map(|r| r.issue_time);
            let t = next_req.map_or(t_act, |tr| tr.min(t_act));
            match end {
                Some(e) if t > e => break,
                None if next_req.is_none() => break,
                _ => {}
            }
            match next_req {
                Some(tr) if tr <= t_act => {
                    let req = *pending.next().expect("peeked");
                    self.handle_request(req, observer)?;
                }
                _ => {
                    self.handle_action_instant(planner, observer)?;
                }
            }
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> SimOutcome {
        let t_sim = self.config.end.unwrap_or(self.state.now) - self.config.start;
        SimOutcome {
            substrate: self.substrate,
            teg: self.state.teg,
            served: self.state.served,
            unserved: self.state.unserved,
            reward: self.state.reward,
            issued: self.state.issued,
            unserved_series: self.series,
            audit: self.audit,
            decisions: self.decisions,
            t_sim,
            config: self.config,
        }
    }
}

/// Runs a complete simulation.
pub fn run(
    config: &SimConfig,
    substrate: Arc<SubstrateGraph>,
    stream: &EventStream,
    planner: &mut dyn Planner,
    observer: &mut dyn SimObserver,
) -> Result<SimOutcome> {
    Simulation::new(config.clone(), substrate)?.run(stream, planner, observer)
}
