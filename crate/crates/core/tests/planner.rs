use std::sync::Arc;

use od2n_core::envmodel::{EnvModel, OdMatrix, RegressorKind, SvrParams, TemporalModel};
use od2n_core::planner::{Budget, Dynamics, MctsParams, MctsPlanner, PlanningState, Planner, RandomPlanner, RootChoice};
use od2n_core::router::{ServicePolicy, ServiceRule, WalkModel};
use od2n_core::substrate::{Stop, StopId, SubstrateGraph};
use od2n_core::seeded_rng;
use od2n_core::teg::{BusId, Teg};

fn corridor(n: usize) -> Arc<SubstrateGraph> {
    let stops = (0..n).map(|i| Stop::planar(i as u32, 1000.0 * i as f64, 0.0)).collect();
    Arc::new(SubstrateGraph::fully_connected(stops, 12.0).unwrap())
}

fn demand(sub: &SubstrateGraph, rate: f64, pairs: &[(usize, usize)]) -> Arc<EnvModel> {
    let counts: Vec<(i64, f64)> = (0..1440).map(|s| (s, rate)).collect();
    let temporal = TemporalModel::fit_counts(1.0, &counts, RegressorKind::SlotMean, &SvrParams::default()).unwrap();
    let od = OdMatrix::from_weights(pairs.iter().map(|&(u, v)| ((StopId(u), StopId(v)), 1.0))).unwrap();
    Arc::new(EnvModel::new(temporal, od, sub).unwrap())
}

fn dynamics(buffer: f64, max_wait: Option<f64>) -> Dynamics {
    Dynamics {
        buffer,
        rule: ServiceRule {
            walk: WalkModel::new(4.3, Some(0.0)),
            policy: ServicePolicy { max_wait, max_transfers: None },
        },
        max_candidates: None,
    }
}

fn params(n: usize) -> MctsParams {
    MctsParams {
        budget: Budget::Simulations(n),
        trace: true,
        ..MctsParams::default()
    }
}

/// A single bus in the middle of a 5-stop corridor; all demand shuttles
/// between the middle stop and the east end, and nobody waits more than 10
/// minutes.
fn eastbound() -> (Teg, Arc<EnvModel>, Dynamics) {
    let sub = corridor(5);
    let model = demand(&sub, 1.0, &[(2, 4), (4, 2)]);
    let teg = Teg::new(sub, &[(StopId(2), 0.0)]).unwrap();
    (teg, model, dynamics(10.0, Some(10.0)))
}

#[test]
fn root_statistics_account_for_every_simulation() {
    let (teg, model, dyn_) = eastbound();
    for workers in [1, 3] {
        let planner = MctsPlanner::new(MctsParams { workers, ..params(61) }, model.clone()).unwrap();
        let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
        let out = planner.search(&state, &mut seeded_rng(5)).unwrap();
        let merged: u64 = out.root_stats.iter().map(|s| s.visits).sum();
        assert_eq!(merged, 61);
        assert_eq!(out.trees.iter().map(|t| t.root().visits).sum::<u64>(), 61);
        for tree in &out.trees {
            let root = tree.root();
            let children: u64 = root.children.iter().map(|&(_, c)| tree.node(c).visits).sum();
            assert_eq!(children, root.visits);
            assert_eq!(root.rewards.len() as u64, root.visits);
        }
        assert_eq!(out.trace.len(), 61);
        let traced: f64 = out.trace.iter().map(|r| r.reward).sum();
        let summed: f64 = out.root_stats.iter().map(|s| s.reward_sum).sum();
        assert!((traced - summed).abs() < 1e-9);
        assert!(out.trace.iter().all(|r| !r.actions.is_empty()));
    }
}

#[test]
fn search_is_reproducible_per_seed() {
    let (teg, model, dyn_) = eastbound();
    let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
    for workers in [1, 4] {
        let planner = MctsPlanner::new(MctsParams { workers, ..params(80) }, model.clone()).unwrap();
        let a = planner.search(&state, &mut seeded_rng(11)).unwrap();
        let b = planner.search(&state, &mut seeded_rng(11)).unwrap();
        assert_eq!(a.choice, b.choice);
        assert_eq!(a.root_stats, b.root_stats);
        assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn moves_toward_the_demand() {
    let (teg, model, dyn_) = eastbound();
    let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
    let mut planner = MctsPlanner::new(params(100), model).unwrap();
    let east = (0..100)
        .filter(|&seed| {
            let a = planner.plan(&state, &mut seeded_rng(seed)).unwrap();
            a == StopId(3) || a == StopId(4)
        })
        .count();
    assert!(east >= 95, "only {east}/100 decisions went east");
}

#[test]
fn root_choice_rules_differ_only_in_ranking() {
    let (teg, model, dyn_) = eastbound();
    let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
    for choice in [RootChoice::Mean, RootChoice::Visits, RootChoice::Max] {
        let planner = MctsPlanner::new(MctsParams { root_choice: choice, ..params(40) }, model.clone()).unwrap();
        let out = planner.search(&state, &mut seeded_rng(3)).unwrap();
        assert!(out.root_stats.iter().any(|s| s.action == out.choice));
        assert_eq!(choice.to_string().parse::<RootChoice>().unwrap(), choice);
    }
}

#[test]
fn random_planner_stays_inside_the_action_set() {
    let (teg, _, dyn_) = eastbound();
    let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
    let actions = state.actions().unwrap();
    assert_eq!(actions.len(), 4);
    let mut rng = seeded_rng(1);
    for _ in 0..50 {
        assert!(actions.contains(&RandomPlanner.plan(&state, &mut rng).unwrap()));
    }
}

#[test]
fn wall_clock_budget_terminates() {
    let (teg, model, dyn_) = eastbound();
    let state = PlanningState { now: -10.0, teg: &teg, unserved: &[], frontier: BusId(0), dynamics: &dyn_ };
    let p = MctsParams { budget: Budget::WallClock(std::time::Duration::from_millis(30)), ..params(1) };
    let out = MctsPlanner::new(p, model).unwrap().search(&state, &mut seeded_rng(2)).unwrap();
    assert!(out.root_stats.iter().map(|s| s.visits).sum::<u64>() >= 1);
}

#[test]
fn invalid_parameters_are_rejected() {
    let model = demand(&corridor(3), 1.0, &[(0, 1)]);
    assert!(MctsPlanner::new(params(0), model.clone()).is_err());
    assert!(MctsPlanner::new(MctsParams { rollout_depth: 0, ..params(5) }, model.clone()).is_err());
    assert!(MctsPlanner::new(MctsParams { workers: 0, ..params(5) }, model).is_err());
}

