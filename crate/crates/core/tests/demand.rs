use od2n_core::envmodel::{EnvModel, OdMatrix, RegressorKind};
use od2n_core::router::Request;
use od2n_core::substrate::{Stop, StopId, SubstrateGraph};
use od2n_core::seeded_rng;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::statistics::Statistics;

fn stops(n: usize) -> SubstrateGraph {
    let s = (0..n).map(|i| Stop::planar(100 + i as u32, 800.0 * i as f64, 0.0)).collect();
    SubstrateGraph::fully_connected(s, 17.3).unwrap()
}

#[test]
fn od_sampling_passes_chi_square() {
    let weights = [((0, 1), 5.0), ((1, 0), 1.0), ((2, 0), 2.0), ((0, 2), 0.5), ((1, 2), 1.5)];
    let od = OdMatrix::from_weights(weights.iter().map(|&((u, v), w)| ((StopId(u), StopId(v)), w))).unwrap();
    let mut rng = seeded_rng(31);
    let n = 50_000;
    let mut counts = vec![0usize; weights.len()];
    for _ in 0..n {
        let (o, d) = od.sample(&mut rng);
        counts[weights.iter().position(|&((u, v), _)| (StopId(u), StopId(v)) == (o, d)).unwrap()] += 1;
    }
    let chi2: f64 = weights
        .iter()
        .zip(&counts)
        .map(|(&((u, v), _), &c)| {
            let e = od.prob(StopId(u), StopId(v)) * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    assert!(chi2 < ChiSquared::new(4.0).unwrap().inverse_cdf(0.999), "chi-square {chi2}");
}

/// Two weeks of trips whose rate follows a daily wave; the SVR should track
/// the wave on the following day.
#[test]
fn svr_tracks_a_daily_cycle() {
    let sub = stops(3);
    let mut rng = seeded_rng(8);
    let rate = |t: f64| 4.0 + 3.0 * (t / 1440.0 * std::f64::consts::TAU).sin();
    let slot = 60.0;
    let mut history = Vec::new();
    for h in 0..14 * 24 {
        let t0 = h as f64 * slot;
        let k = (rate(t0 + 30.0) * slot / 10.0).round() as usize;
        for _ in 0..k {
            let o = rng.gen_range(0..3);
            history.push(Request::new(StopId(o), StopId((o + 1) % 3), t0 + rng.gen::<f64>() * slot).unwrap());
        }
    }
    history.sort_by(|a, b| a.issue_time.total_cmp(&b.issue_time));
    let (model, stats) = EnvModel::fit(&history, &sub, slot, RegressorKind::LinearSvr).unwrap();
    assert_eq!(stats.used, history.len());
    let day = 14 * 24;
    let predicted: Vec<f64> = (day..day + 24).map(|s| model.temporal().predict_count(s)).collect();
    let truth: Vec<f64> = (day..day + 24).map(|s| rate(s as f64 * slot + 30.0) * slot / 10.0).collect();
    let (mp, mt) = (predicted.iter().mean(), truth.iter().mean());
    let cov: f64 = predicted.iter().zip(&truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let r = cov / (predicted.iter().std_dev() * truth.iter().std_dev() * 23.0);
    assert!(r > 0.9, "correlation {r}");
    assert!((mp - mt).abs() / mt < 0.1, "level {mp} vs {mt}");
}

#[test]
fn saved_models_load_only_against_the_same_stops() {
    let sub = stops(3);
    let history: Vec<Request> = (0..50)
        .map(|i| Request::new(StopId(i % 3), StopId((i + 1) % 3), i as f64).unwrap())
        .collect();
    let (model, _) = EnvModel::fit(&history, &sub, 5.0, RegressorKind::SlotMean).unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    model.save(file.path(), &sub).unwrap();
    let back = EnvModel::load(file.path(), &sub).unwrap();
    assert_eq!(back.to_text(&sub), model.to_text(&sub));
    assert!(matches!(EnvModel::load(file.path(), &stops(4)), Err(od2n_core::Error::Validation(_))));
}

#[test]
fn fitting_nothing_fails() {
    let err = EnvModel::fit(&[], &stops(3), 1.0, RegressorKind::LinearSvr).unwrap_err();
    assert!(err.to_string().contains("empty history"));
}
