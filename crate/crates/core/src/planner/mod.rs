//! Design-action planners. Given the state at an action instant, a planner
//! picks the next stop of the frontier bus.

mod mcts;
mod tree;

pub use mcts::{Budget, MctsParams, MctsPlanner, RootChoice, TraceRecord};
pub use tree::{uct, NodeId, SearchNode, SearchTree};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::envmodel::EnvModel;
use crate::router::{Request, ServiceRule, Timetable};
use crate::substrate::StopId;
use crate::teg::{BusId, Teg};
use crate::{Error, Minutes, Result, SimRng};

/// Source of simulated requests for planning.
pub trait DemandModel: Send + Sync {
    /// Requests issued in `[from, to)`, sorted by issue time.
    fn sample_requests(&self, from: Minutes, to: Minutes, rng: &mut SimRng) -> Vec<Request>;
}

impl DemandModel for EnvModel {
    fn sample_requests(&self, from: Minutes, to: Minutes, rng: &mut SimRng) -> Vec<Request> {
        EnvModel::sample_requests(self, from, to, rng)
    }
}

/// Rules every transition obeys, in the real system and in simulations alike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub buffer: Minutes,
    pub rule: ServiceRule,
    /// Keep only this many nearest candidate stops per action.
    pub max_candidates: Option<usize>,
}

impl Dynamics {
    pub fn actions(&self, teg: &Teg, bus: BusId, now: Minutes) -> Result<Vec<StopId>> {
        teg.action_set(bus, now, self.buffer, self.max_candidates)
    }

    /// Action instant implied by the schedule: the earliest line end minus the buffer.
    pub fn next_instant(&self, teg: &Teg) -> Minutes {
        teg.built_until() - self.buffer
    }

    /// Reward of the interval `[from, to)` on `teg`: backlog requests served
    /// from `from`, then freshly sampled requests routed at their issue
    /// times. Unserved fresh requests join the backlog.
    pub fn interval_reward(
        &self,
        teg: &Teg,
        from: Minutes,
        to: Minutes,
        backlog: &mut Vec<Request>,
        demand: &dyn DemandModel,
        rng: &mut SimRng,
    ) -> usize {
        let table = Timetable::new(teg, from, teg.built_until());
        let mut reward = self.rule.drain_backlog_count(&table, backlog, from);
        for req in demand.sample_requests(from, to, rng) {
            if self.rule.servable(&table, &req, req.issue_time) {
                reward += 1;
            } else {
                backlog.push(req);
            }
        }
        reward
    }
}

/// Where a decision is taken.
#[derive(Debug, Clone, Copy)]
pub struct PlanningState<'a> {
    pub now: Minutes,
    pub teg: &'a Teg,
    pub unserved: &'a [Request],
    pub frontier: BusId,
    pub dynamics: &'a Dynamics,
}

impl PlanningState<'_> {
    pub fn actions(&self) -> Result<Vec<StopId>> {
        let actions = self.dynamics.actions(self.teg, self.frontier, self.now)?;
        if actions.is_empty() {
            return Err(Error::Domain(format!(
                "bus {} has no action at stop {}",
                self.frontier.0,
                self.teg.buses()[self.frontier.0].terminal()
            )));
        }
        Ok(actions)
    }
}

pub trait Planner {
    fn plan(&mut self, state: &PlanningState<'_>, rng: &mut SimRng) -> Result<StopId>;

    fn name(&self) -> &'static str;
}

/// Uniform choice over the action set.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPlanner;

impl Planner for RandomPlanner {
    fn plan(&mut self, state: &PlanningState<'_>, rng: &mut SimRng) -> Result<StopId> {
        let actions = state.actions()?;
        Ok(*actions.choose(rng).expect("non-empty action set"))
    }

    fn name(&self) -> &'static str {
        "random"
    }
}

/// Random playout of `depth` actions from `(now, teg, frontier)`; returns the
/// reward collected on the way.
pub(crate) fn rollout(
    dynamics: &Dynamics,
    demand: &dyn DemandModel,
    mut teg: Teg,
    mut now: Minutes,
    mut frontier: BusId,
    backlog: &mut Vec<Request>,
    depth: usize,
    rng: &mut SimRng,
) -> Result<usize> {
    let mut reward = 0;
    for _ in 0..depth {
        let actions = dynamics.actions(&teg, frontier, now)?;
        let Some(&action) = actions.choose(rng) else { break };
        teg.append_edge(frontier, action)?;
        let next = dynamics.next_instant(&teg);
        reward += dynamics.interval_reward(&teg, now, next, backlog, demand, rng);
        frontier = teg.frontier_bus(rng)?.0;
        now = next;
    }
    Ok(reward)
}

pub(crate) fn random_index<R: Rng + ?Sized>(len: usize, rng: &mut R) -> usize {
    rng.gen_range(0..len)
}
