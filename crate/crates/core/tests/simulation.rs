use std::sync::Arc;

use od2n_core::envmodel::{EnvModel, OdMatrix, RegressorKind, SvrParams, TemporalModel};
use od2n_core::planner::{Budget, MctsParams, MctsPlanner, RandomPlanner};
use od2n_core::router::{validate_path, Request};
use od2n_core::simulator::{run, EventStream, NdjsonProgress, NoObserver, SimConfig, SimOutcome};
use od2n_core::substrate::{Stop, StopId, SubstrateGraph};
use od2n_core::seeded_rng;

fn ring(n: usize) -> Arc<SubstrateGraph> {
    let stops = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            Stop::planar(i as u32, 2000.0 * a.cos(), 2000.0 * a.sin())
        })
        .collect();
    Arc::new(SubstrateGraph::fully_connected(stops, 17.3).unwrap())
}

fn model(sub: &SubstrateGraph) -> Arc<EnvModel> {
    let counts: Vec<(i64, f64)> = (0..1440).map(|s| (s, 0.5)).collect();
    let temporal = TemporalModel::fit_counts(1.0, &counts, RegressorKind::SlotMean, &SvrParams::default()).unwrap();
    let n = sub.len();
    let od = OdMatrix::from_weights(
        (0..n).flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| ((StopId(u), StopId(v)), 1.0 + (u + v) as f64))),
    )
    .unwrap();
    Arc::new(EnvModel::new(temporal, od, sub).unwrap())
}

fn stream(model: &EnvModel, from: f64, to: f64, seed: u64) -> EventStream {
    EventStream::new(model.sample_requests(from, to, &mut seeded_rng(seed))).unwrap()
}

fn config(seed: u64) -> SimConfig {
    SimConfig {
        fleet_size: 3,
        buffer: 20.0,
        end: Some(90.0),
        seed,
        mcts: MctsParams { budget: Budget::Simulations(30), ..MctsParams::default() },
        ..SimConfig::default()
    }
}

fn mcts_run(cfg: &SimConfig, sub: &Arc<SubstrateGraph>, m: &Arc<EnvModel>, s: &EventStream) -> SimOutcome {
    let mut planner = MctsPlanner::new(cfg.mcts, m.clone()).unwrap();
    run(cfg, sub.clone(), s, &mut planner, &mut NoObserver).unwrap()
}

#[test]
fn served_paths_are_valid_in_the_final_graph() {
    let sub = ring(6);
    let m = model(&sub);
    for seed in 0..4 {
        let cfg = SimConfig { max_walk: Some(12.0), max_wait: Some(25.0), ..config(seed) };
        let s = stream(&m, 0.0, 90.0, seed);
        let out = mcts_run(&cfg, &sub, &m, &s);
        assert!(out.audit.is_clean());
        for rec in &out.served {
            assert!(validate_path(&rec.path, &out.teg, &cfg.walk()));
            assert!(rec.serve_time >= rec.request.issue_time);
            assert!(rec.path.first_departure() >= rec.request.issue_time);
            assert!(rec.path.initial_wait() <= 25.0 + 1e-9);
        }
        assert!(out.unserved_series.windows(2).all(|w| w[0].0 < w[1].0));
    }
}

#[test]
fn same_seed_same_outcome() {
    let sub = ring(5);
    let m = model(&sub);
    let s = stream(&m, 0.0, 90.0, 9);
    let a = mcts_run(&config(4), &sub, &m, &s);
    let b = mcts_run(&config(4), &sub, &m, &s);
    assert_eq!(a.teg.snapshot_text(), b.teg.snapshot_text());
    assert_eq!(a.served, b.served);
    assert_eq!(a.unserved, b.unserved);
}

#[test]
fn initial_network_does_not_depend_on_the_planner() {
    let sub = ring(5);
    let m = model(&sub);
    let cfg = SimConfig { end: Some(1.0), ..config(21) };
    let empty = EventStream::new(Vec::new()).unwrap();
    let a = mcts_run(&cfg, &sub, &m, &empty);
    let b = run(&cfg, sub.clone(), &empty, &mut RandomPlanner, &mut NoObserver).unwrap();
    let origins = |o: &SimOutcome| o.teg.buses().iter().map(|b| (b.origin(), b.start())).collect::<Vec<_>>();
    assert_eq!(origins(&a), origins(&b));
}

#[test]
fn endless_mode_stops_with_the_stream() {
    let sub = ring(4);
    let m = model(&sub);
    let s = stream(&m, 0.0, 60.0, 3);
    let last = s.requests().last().unwrap().issue_time;
    let cfg = SimConfig { end: None, ..config(1) };
    let out = run(&cfg, sub.clone(), &s, &mut RandomPlanner, &mut NoObserver).unwrap();
    assert_eq!(out.issued, s.len() as u64);
    assert!(out.t_sim >= last - 1e-9);
}

#[test]
fn requests_before_the_start_are_rejected() {
    let sub = ring(4);
    let early = EventStream::new(vec![Request::new(StopId(0), StopId(1), -5.0).unwrap()]).unwrap();
    let err = run(&config(0), sub, &early, &mut RandomPlanner, &mut NoObserver);
    assert!(matches!(err, Err(od2n_core::Error::Validation(_))));
}

#[test]
fn unsorted_streams_are_rejected() {
    let r = |t| Request::new(StopId(0), StopId(1), t).unwrap();
    assert!(EventStream::new(vec![r(3.0), r(1.0)]).is_err());
    assert_eq!(EventStream::sorted(vec![r(3.0), r(1.0)]).unwrap().requests()[0].issue_time, 1.0);
}

#[test]
fn progress_records_are_json_lines() {
    let sub = ring(4);
    let m = model(&sub);
    let s = stream(&m, 0.0, 90.0, 2);
    let cfg = SimConfig { progress_every: Some(30.0), ..config(2) };
    let mut buf = Vec::new();
    run(&cfg, sub, &s, &mut RandomPlanner, &mut NdjsonProgress(&mut buf)).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 2);
    assert!(lines.iter().all(|v| v["fleet"] == 3));
}

#[test]
fn invalid_configurations_fail_fast() {
    let sub = ring(4);
    let empty = EventStream::new(Vec::new()).unwrap();
    for cfg in [
        SimConfig { fleet_size: 0, ..config(0) },
        SimConfig { buffer: -1.0, ..config(0) },
        SimConfig { bus_speed_kmh: 0.0, ..config(0) },
    ] {
        assert!(run(&cfg, sub.clone(), &empty, &mut RandomPlanner, &mut NoObserver).is_err());
    }
}
