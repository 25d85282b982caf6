//! Open-loop Monte Carlo Tree Search over line extensions.
//!
//! Tree nodes hold the designed graph and the decision time; the stochastic
//! part of the state (the unserved backlog and the simulated requests) is
//! re-drawn along the path on every simulation.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use super::tree::{NodeId, SearchNode, SearchTree};
use super::{rollout, DemandModel, Dynamics, Planner, PlanningState};
use crate::substrate::StopId;
use crate::{seeded_rng, Error, Result, SimRng};

/// How much search to spend per decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Simulations(usize),
    WallClock(Duration),
}

/// Statistic used to pick the root action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootChoice {
    #[default]
    Mean,
    Visits,
    Max,
}

impl std::str::FromStr for RootChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RootChoice::Mean),
            "visits" => Ok(RootChoice::Visits),
            "max" => Ok(RootChoice::Max),
            other => Err(Error::Validation(format!("unknown root choice {other:?}"))),
        }
    }
}

impl std::fmt::Display for RootChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RootChoice::Mean => "mean",
            RootChoice::Visits => "visits",
            RootChoice::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MctsParams {
    pub exploration: f64,
    /// Actions per simulation, tree and rollout together.
    pub rollout_depth: usize,
    pub budget: Budget,
    pub root_choice: RootChoice,
    /// Independent root-parallel trees, merged at the root.
    pub workers: usize,
    pub trace: bool,
}

impl Default for MctsParams {
    fn default() -> Self {
        MctsParams {
            exploration: 2.0,
            rollout_depth: 5,
            budget: Budget::Simulations(300),
            root_choice: RootChoice::Mean,
            workers: 1,
            trace: false,
        }
    }
}

impl MctsParams {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_depth == 0 {
            return Err(Error::Validation("rollout depth must be at least 1".into()));
        }
        if self.budget == Budget::Simulations(0) {
            return Err(Error::Validation("simulation budget must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("need at least one worker".into()));
        }
        if !(self.exploration.is_finite() && self.exploration >= 0.0) {
            return Err(Error::Validation(format!("exploration constant {}", self.exploration)));
        }
        Ok(())
    }
}

/// One simulation: the actions taken below the root and the root's reward sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub worker: usize,
    pub sim: usize,
    /// Tree actions followed by rollout actions are not distinguished.
    pub actions: Vec<StopId>,
    pub reward: f64,
}

/// Merged root statistics for one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootStat {
    pub action: StopId,
    pub visits: u64,
    pub reward_sum: f64,
    pub max_reward: f64,
}

impl RootStat {
    pub fn mean(&self) -> f64 {
        self.reward_sum / self.visits as f64
    }
}

/// Everything a search produced.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub choice: StopId,
    pub root_stats: Vec<RootStat>,
    pub trees: Vec<SearchTree>,
    pub trace: Vec<TraceRecord>,
}

type WorkerResult = (SearchTree, Vec<TraceRecord>, Vec<(StopId, f64)>);

pub struct MctsPlanner {
    params: MctsParams,
    demand: Arc<dyn DemandModel>,
    trace: Vec<TraceRecord>,
}

impl MctsPlanner {
    pub fn new(params: MctsParams, demand: Arc<dyn DemandModel>) -> Result<Self> {
        params.validate()?;
        Ok(MctsPlanner {
            params,
            demand,
            trace: Vec::new(),
        })
    }

    pub fn params(&self) -> &MctsParams {
        &self.params
    }

    /// Trace of the most recent decision, if tracing is on.
    pub fn last_trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Runs the full search and returns the trees alongside the decision.
    pub fn search(&self, state: &PlanningState<'_>, rng: &mut SimRng) -> Result<SearchOutcome> {
        let actions = state.actions()?;
        let workers = self.params.workers;
        let seeds: Vec<u64> = (0..workers).map(|_| rng.gen()).collect();
        let quota = |w: usize| match self.params.budget {
            Budget::Simulations(n) => Some(n / workers + usize::from(w < n % workers)),
            Budget::WallClock(_) => None,
        };
        let deadline = match self.params.budget {
            Budget::WallClock(d) => Some(Instant::now() + d),
            Budget::Simulations(_) => None,
        };

        let results: Vec<Result<WorkerResult>> = if workers == 1 {
            vec![self.run_worker(state, &actions, seeds[0], quota(0), deadline, 0)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .filter(|&w| quota(w) != Some(0))
                    .map(|w| {
                        let actions = &actions;
                        let seed = seeds[w];
                        let q = quota(w);
                        scope.spawn(move || self.run_worker(state, actions, seed, q, deadline, w))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("planner worker panicked".into()))))
                    .collect()
            })
        };

        let mut trees = Vec::with_capacity(results.len());
        let mut trace = Vec::new();
        let mut samples = Vec::new();
        for r in results {
            let (tree, t, s) = r?;
            trees.push(tree);
            trace.extend(t);
            samples.extend(s);
        }
        let root_stats = merge_root(&actions, &samples);
        let choice = choose(&root_stats, self.params.root_choice)
            .ok_or_else(|| Error::Contract("search finished without visiting any action".into()))?;
        Ok(SearchOutcome {
            choice,
            root_stats,
            trees,
            trace,
        })
    }

    fn run_worker(
        &self,
        state: &PlanningState<'_>,
        actions: &[StopId],
        seed: u64,
        quota: Option<usize>,
        deadline: Option<Instant>,
        worker: usize,
    ) -> Result<WorkerResult> {
        let dynamics = state.dynamics;
        let demand = self.demand.as_ref();
        let mut rng = seeded_rng(seed);
        let root = SearchNode::new(state.now, state.teg.clone(), Some(state.frontier), actions.to_vec());
        let mut tree = SearchTree::new(root);
        let mut trace = Vec::new();
        let mut samples = Vec::new();
        let mut sim = 0;
        loop {
            match (quota, deadline) {
                (Some(n), _) if sim >= n => break,
                (None, Some(d)) if sim > 0 && Instant::now() >= d => break,
                _ => {}
            }
            let mut backlog = state.unserved.to_vec();
            let mut path = tree.select(self.params.exploration);
            let mut steps = Vec::with_capacity(path.len());
            for w in path.windows(2) {
                steps.push(step_reward(&tree, w[0], w[1], dynamics, demand, &mut backlog, &mut rng));
            }
            let leaf = *path.last().expect("path starts at the root");
            if tree.node(leaf).is_expandable() && path.len() <= self.params.rollout_depth {
                let child = tree.expand(leaf, &mut rng, |parent, action, rng| {
                    child_state(dynamics, parent, action, rng)
                })?;
                steps.push(step_reward(&tree, leaf, child, dynamics, demand, &mut backlog, &mut rng));
                path.push(child);
            }
            let node = tree.node(*path.last().expect("non-empty path"));
            let remaining = (self.params.rollout_depth + 1).saturating_sub(path.len());
            let leaf_reward = match node.frontier {
                Some(bus) if remaining > 0 => rollout(
                    dynamics,
                    demand,
                    node.teg.clone(),
                    node.sim_time,
                    bus,
                    &mut backlog,
                    remaining,
                    &mut rng,
                )? as f64,
                _ => 0.0,
            };
            tree.backpropagate(&path, leaf_reward, &steps);
            let total = leaf_reward + steps.iter().sum::<f64>();
            if let Some(action) = path.get(1).and_then(|&id| tree.node(id).action) {
                samples.push((action, total));
            }
            if self.params.trace {
                trace.push(TraceRecord {
                    worker,
                    sim,
                    actions: path[1..].iter().filter_map(|&id| tree.node(id).action).collect(),
                    reward: total,
                });
            }
            sim += 1;
        }
        Ok((tree, trace, samples))
    }
}

impl Planner for MctsPlanner {
    fn plan(&mut self, state: &PlanningState<'_>, rng: &mut SimRng) -> Result<StopId> {
        let outcome = self.search(state, rng)?;
        self.trace = outcome.trace;
        Ok(outcome.choice)
    }

    fn name(&self) -> &'static str {
        "mcts"
    }
}

/// State after taking `action` at `parent`: the extended graph, the next
/// action instant and the bus to extend there.
fn child_state(dynamics: &Dynamics, parent: &SearchNode, action: StopId, rng: &mut SimRng) -> Result<SearchNode> {
    let bus = parent
        .frontier
        .ok_or_else(|| Error::Contract("expanding a terminal node".into()))?;
    let teg = parent.teg.with_edge(bus, action)?;
    let now = dynamics.next_instant(&teg);
    let frontier = teg.frontier_bus(rng)?.0;
    let untried = dynamics.actions(&teg, frontier, now)?;
    let frontier = (!untried.is_empty()).then_some(frontier);
    Ok(SearchNode::new(now, teg, frontier, untried))
}

fn step_reward(
    tree: &SearchTree,
    parent: NodeId,
    child: NodeId,
    dynamics: &Dynamics,
    demand: &dyn DemandModel,
    backlog: &mut Vec<crate::router::Request>,
    rng: &mut SimRng,
) -> f64 {
    let (p, c) = (tree.node(parent), tree.node(child));
    dynamics.interval_reward(&c.teg, p.sim_time, c.sim_time, backlog, demand, rng) as f64
}

/// Root statistics from the per-simulation cumulative rewards, which include
/// the reward of the root action itself.
fn merge_root(actions: &[StopId], samples: &[(StopId, f64)]) -> Vec<RootStat> {
    let mut stats: Vec<RootStat> = actions
        .iter()
        .map(|&action| RootStat {
            action,
            visits: 0,
            reward_sum: 0.0,
            max_reward: f64::NEG_INFINITY,
        })
        .collect();
    for &(action, reward) in samples {
        if let Some(s) = stats.iter_mut().find(|s| s.action == action) {
            s.visits += 1;
            s.reward_sum += reward;
            s.max_reward = s.max_reward.max(reward);
        }
    }
    stats.retain(|s| s.visits > 0);
    stats
}

/// Best root action; ties go to more visits, then to the earlier action.
pub(crate) fn choose(stats: &[RootStat], rule: RootChoice) -> Option<StopId> {
    let key = |s: &RootStat| match rule {
        RootChoice::Mean => (s.mean(), s.visits as f64),
        RootChoice::Visits => (s.visits as f64, s.mean()),
        RootChoice::Max => (s.max_reward, s.visits as f64),
    };
    let mut best: Option<&RootStat> = None;
    for s in stats {
        if best.is_none_or(|b| key(s) > key(b)) {
            best = Some(s);
        }
    }
    best.map(|s| s.action)
}
