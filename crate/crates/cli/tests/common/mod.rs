//! Synthetic scenarios shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use od2n_core::envmodel::{EnvModel, OdMatrix, RegressorKind, SvrParams, TemporalModel};
use od2n_core::planner::{DemandModel, MctsParams, MctsPlanner, Planner, RandomPlanner};
use od2n_core::router::Request;
use od2n_core::simulator::{EventStream, NoObserver, SimConfig, SimObserver, SimOutcome, Simulation};
use od2n_core::substrate::{Stop, StopId, SubstrateGraph};
use od2n_core::{seeded_rng, Minutes};

/// Stops on a straight line, `spacing_m` apart, labelled from 1.
pub fn corridor(n: usize, spacing_m: f64, bus_speed: f64) -> Arc<SubstrateGraph> {
    let stops = (0..n)
        .map(|i| Stop::planar(i as u32 + 1, i as f64 * spacing_m, 0.0))
        .collect();
    Arc::new(SubstrateGraph::fully_connected(stops, bus_speed).unwrap())
}

/// `side x side` grid of stops `spacing_m` apart, labelled from 1.
pub fn grid(side: usize, rows: usize, spacing_m: f64, bus_speed: f64) -> Arc<SubstrateGraph> {
    let stops = (0..rows * side)
        .map(|i| {
            Stop::planar(
                i as u32 + 1,
                (i % side) as f64 * spacing_m,
                (i / side) as f64 * spacing_m,
            )
        })
        .collect();
    Arc::new(SubstrateGraph::fully_connected(stops, bus_speed).unwrap())
}

/// Demand model with a constant rate (requests per minute) and fixed OD weights.
pub fn constant_demand(substrate: &SubstrateGraph, rate: f64, od: &[((usize, usize), f64)]) -> EnvModel {
    let counts: Vec<(i64, f64)> = (0..1440).map(|s| (s, rate)).collect();
    let temporal = TemporalModel::fit_counts(1.0, &counts, RegressorKind::SlotMean, &SvrParams::default()).unwrap();
    let od = OdMatrix::from_weights(od.iter().map(|&((u, v), w)| ((StopId(u), StopId(v)), w))).unwrap();
    EnvModel::new(temporal, od, substrate).unwrap()
}

/// Real request stream drawn from the same model as the planner's surrogate.
pub fn stream_from(model: &EnvModel, from: Minutes, to: Minutes, seed: u64) -> EventStream {
    let mut rng = seeded_rng(seed);
    EventStream::new(DemandModel::sample_requests(model, from, to, &mut rng)).unwrap()
}

pub fn run_with(
    config: &SimConfig,
    substrate: Arc<SubstrateGraph>,
    stream: &EventStream,
    planner: &mut dyn Planner,
    observer: &mut dyn SimObserver,
) -> SimOutcome {
    Simulation::new(config.clone(), substrate)
        .unwrap()
        .run(stream, planner, observer)
        .unwrap()
}

pub fn run_mcts(config: &SimConfig, substrate: Arc<SubstrateGraph>, model: Arc<EnvModel>, stream: &EventStream) -> SimOutcome {
    let mut planner = MctsPlanner::new(config.mcts, model).unwrap();
    run_with(config, substrate, stream, &mut planner, &mut NoObserver)
}

pub fn run_random(config: &SimConfig, substrate: Arc<SubstrateGraph>, stream: &EventStream) -> SimOutcome {
    run_with(config, substrate, stream, &mut RandomPlanner, &mut NoObserver)
}

pub fn service_rate(o: &SimOutcome) -> f64 {
    if o.issued == 0 {
        0.0
    } else {
        o.served.len() as f64 / o.issued as f64
    }
}

/// `issued == served + unserved` and `reward == served`, exactly.
pub fn conserved(o: &SimOutcome) -> bool {
    o.issued == (o.served.len() + o.unserved.len()) as u64 && o.reward == o.served.len() as u64
}

pub fn mcts_params(simulations: usize) -> MctsParams {
    MctsParams {
        budget: od2n_core::planner::Budget::Simulations(simulations),
        ..MctsParams::default()
    }
}

pub fn requests(stream: &EventStream) -> &[Request] {
    stream.requests()
}

/// Six stops labelled 10..15 and three mornings of trips between them.
pub fn write_fixture(dir: &std::path::Path) {
    let mut stops = String::from("id,x_m,y_m\n");
    for i in 0..6 {
        stops.push_str(&format!("{},{},{}\n", 10 + i, (i % 3) * 1200, (i / 3) * 1200));
    }
    std::fs::write(dir.join("stops.csv"), stops).unwrap();
    let mut rng = seeded_rng(99);
    use rand::Rng;
    let mut trips = String::from("pickup_datetime,pu_zone_id,do_zone_id\n");
    let mut rows = Vec::new();
    for day in 1..=3 {
        for _ in 0..300 {
            let minute = rng.gen_range(8 * 60..11 * 60);
            let o = rng.gen_range(0..6);
            let d = (o + rng.gen_range(1..6)) % 6;
            rows.push((day, minute, 10 + o, 10 + d));
        }
    }
    rows.sort();
    for (day, m, o, d) in rows {
        trips.push_str(&format!("2024-02-{day:02}T{:02}:{:02}:00,{o},{d}\n", m / 60, m % 60));
    }
    std::fs::write(dir.join("trips.csv"), trips).unwrap();
}
