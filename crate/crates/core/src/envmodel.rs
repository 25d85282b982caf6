//! Learned demand surrogate: a temporal request-count regressor combined with
//! an origin-destination probability table.
//!
//! Clock values are minutes since the Unix epoch of naive local time, so
//! `floor(t / 1440)` is a calendar day and day 0 (1970-01-01) is a Thursday.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::router::Request;
use crate::substrate::{StopId, SubstrateGraph};
use crate::{seeded_rng, Error, Minutes, Result};

const FORMAT_TAG: &str = "od2n-envmodel 1";
const HARMONICS: usize = 4;
const N_FEATURES: usize = 1 + 2 * HARMONICS + 7;
const DAY: f64 = 1440.0;

/// Origin-destination probabilities `a_uv` over ordered stop pairs.
#[derive(Debug, Clone)]
pub struct OdMatrix {
    pairs: Vec<(StopId, StopId)>,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl OdMatrix {
    /// Builds the matrix from non-negative pair weights, normalising them.
    pub fn from_weights(entries: impl IntoIterator<Item = ((StopId, StopId), f64)>) -> Result<Self> {
        let mut merged: std::collections::BTreeMap<(StopId, StopId), f64> = Default::default();
        for ((u, v), w) in entries {
            if u == v {
                return Err(Error::Validation(format!("OD entry on the diagonal at stop {u}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Validation(format!("OD weight {w} for ({u}, {v})")));
            }
            if w > 0.0 {
                *merged.entry((u, v)).or_default() += w;
            }
        }
        let total: f64 = merged.values().sum();
        if merged.is_empty() || total <= 0.0 {
            return Err(Error::Fit("OD matrix has no positive entries".into()));
        }
        let (pairs, probs): (Vec<_>, Vec<_>) = merged.into_iter().map(|(k, w)| (k, w / total)).unzip();
        let sampler = WeightedIndex::new(&probs).map_err(|e| Error::Fit(e.to_string()))?;
        Ok(OdMatrix { pairs, probs, sampler })
    }

    /// Empirical frequencies of the given trips.
    pub fn from_trips<'a>(trips: impl IntoIterator<Item = &'a Request>) -> Result<Self> {
        Self::from_weights(trips.into_iter().map(|r| ((r.origin, r.destination), 1.0)))
    }

    pub fn prob(&self, origin: StopId, destination: StopId) -> f64 {
        self.pairs
            .binary_search(&(origin, destination))
            .map_or(0.0, |i| self.probs[i])
    }

    /// Non-zero entries in `(origin, destination)` order.
    pub fn entries(&self) -> impl Iterator<Item = ((StopId, StopId), f64)> + '_ {
        self.pairs.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (StopId, StopId) {
        self.pairs[self.sampler.sample(rng)]
    }
}

/// Which regressor backs a [`TemporalModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegressorKind {
    #[default]
    LinearSvr,
    SlotMean,
}

impl std::str::FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-svr" => Ok(RegressorKind::LinearSvr),
            "slot-mean" => Ok(RegressorKind::SlotMean),
            other => Err(Error::Validation(format!("unknown regressor {other:?}"))),
        }
    }
}

impl std::fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorKind::LinearSvr => "linear-svr",
            RegressorKind::SlotMean => "slot-mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Regressor {
    /// Linear model over [`features`].
    Linear { weights: [f64; N_FEATURES] },
    /// Mean count per slot of the day; `fallback` for slots never observed.
    SlotMean { means: Vec<Option<f64>>, fallback: f64 },
}

/// Hyperparameters of the epsilon-insensitive linear fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvrParams {
    /// Tube half-width, relative to the mean slot count.
    pub epsilon: f64,
    pub lambda: f64,
    pub step: f64,
    pub min_iterations: usize,
    pub seed: u64,
}

impl Default for SvrParams {
    fn default() -> Self {
        SvrParams {
            epsilon: 0.02,
            lambda: 1e-4,
            step: 0.005,
            min_iterations: 100_000,
            seed: 0x5eed,
        }
    }
}

/// Expected request count per time slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModel {
    slot_length: Minutes,
    regressor: Regressor,
}

/// Day of week with Monday = 0.
pub fn day_of_week(t: Minutes) -> usize {
    ((t / DAY).floor() as i64 + 3).rem_euclid(7) as usize
}

pub fn minute_of_day(t: Minutes) -> f64 {
    t.rem_euclid(DAY)
}

/// Bias, daily Fourier terms, and a day-of-week one-hot.
fn features(t: Minutes) -> [f64; N_FEATURES] {
    let mut x = [0.0; N_FEATURES];
    x[0] = 1.0;
    let phase = 2.0 * PI * minute_of_day(t) / DAY;
    for k in 0..HARMONICS {
        let a = phase * (k + 1) as f64;
        x[1 + 2 * k] = a.sin();
        x[2 + 2 * k] = a.cos();
    }
    x[1 + 2 * HARMONICS + day_of_week(t)] = 1.0;
    x
}

fn dot(w: &[f64; N_FEATURES], x: &[f64; N_FEATURES]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl TemporalModel {
    /// Fits on `(slot index, count)` samples.
    pub fn fit_counts(slot_length: Minutes, counts: &[(i64, f64)], kind: RegressorKind, params: &SvrParams) -> Result<Self> {
        if !(slot_length > 0.0 && slot_length.is_finite()) {
            return Err(Error::Validation(format!("slot length {slot_length} must be positive")));
        }
        if counts.is_empty() {
            return Err(Error::Fit("no slots to fit".into()));
        }
        let regressor = match kind {
            RegressorKind::LinearSvr => Regressor::Linear {
                weights: fit_linear_svr(slot_length, counts, params),
            },
            RegressorKind::SlotMean => fit_slot_mean(slot_length, counts),
        };
        Ok(TemporalModel { slot_length, regressor })
    }

    pub fn slot_length(&self) -> Minutes {
        self.slot_length
    }

    pub fn kind(&self) -> RegressorKind {
        match self.regressor {
            Regressor::Linear { .. } => RegressorKind::LinearSvr,
            Regressor::SlotMean { .. } => RegressorKind::SlotMean,
        }
    }

    pub fn slot_of(&self, t: Minutes) -> i64 {
        (t / self.slot_length).floor() as i64
    }

    /// Expected count in slot `slot`, never negative.
    pub fn predict_count(&self, slot: i64) -> f64 {
        let start = slot as f64 * self.slot_length;
        let y = match &self.regressor {
            Regressor::Linear { weights } => dot(weights, &features(start)),
            Regressor::SlotMean { means, fallback } => {
                let key = day_slot(self.slot_length, start);
                means.get(key).copied().flatten().unwrap_or(*fallback)
            }
        };
        y.max(0.0)
    }
}

fn day_slot(slot_length: Minutes, t: Minutes) -> usize {
    (minute_of_day(t) / slot_length).floor() as usize
}

fn fit_slot_mean(slot_length: Minutes, counts: &[(i64, f64)]) -> Regressor {
    let n_keys = (DAY / slot_length).ceil() as usize;
    let mut sums = vec![(0.0, 0usize); n_keys];
    for &(slot, y) in counts {
        let key = day_slot(slot_length, slot as f64 * slot_length).min(n_keys - 1);
        sums[key].0 += y;
        sums[key].1 += 1;
    }
    let fallback = counts.iter().map(|c| c.1).sum::<f64>() / counts.len() as f64;
    let means = sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    Regressor::SlotMean { means, fallback }
}

/// Epsilon-insensitive linear regression by shuffled subgradient descent with
/// suffix averaging. Targets are scaled by their mean so the step size and the
/// tube width are independent of the demand level.
fn fit_linear_svr(slot_length: Minutes, counts: &[(i64, f64)], p: &SvrParams) -> [f64; N_FEATURES] {
    let mean = counts.iter().map(|c| c.1).sum::<f64>() / counts.len() as f64;
    let mut weights = [0.0; N_FEATURES];
    if mean <= 0.0 {
        return weights;
    }
    let scale = mean.max(1.0);
    let data: Vec<([f64; N_FEATURES], f64)> = counts
        .iter()
        .map(|&(slot, y)| (features(slot as f64 * slot_length), y / scale))
        .collect();
    let n = data.len();
    let epochs = p.min_iterations.div_ceil(n).max(3);
    let total = epochs * n;
    let average_from = total / 2;

    let mut w = [0.0; N_FEATURES];
    w[0] = mean / scale;
    let mut avg = [0.0; N_FEATURES];
    let mut n_avg = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(p.seed);
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &data[i];
            let eta = p.step / (1.0 + t as f64 / n as f64).sqrt();
            let r = dot(&w, x) - y;
            let g = if r > p.epsilon {
                1.0
            } else if r < -p.epsilon {
                -1.0
            } else {
                0.0
            };
            for j in 0..N_FEATURES {
                let reg = if j == 0 { 0.0 } else { p.lambda * w[j] };
                w[j] -= eta * (g * x[j] + reg);
            }
            if t >= average_from {
                n_avg += 1;
                let k = 1.0 / n_avg as f64;
                for j in 0..N_FEATURES {
                    avg[j] += (w[j] - avg[j]) * k;
                }
            }
            t += 1;
        }
    }
    for j in 0..N_FEATURES {
        weights[j] = avg[j] * scale;
    }
    weights
}

/// Temporal and spatial demand model over a fixed stop universe.
#[derive(Debug, Clone)]
pub struct EnvModel {
    temporal: TemporalModel,
    od: OdMatrix,
    labels: Vec<u32>,
}

/// Side information from [`EnvModel::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitStats {
    pub used: usize,
    pub skipped: usize,
    pub slots: usize,
}

impl EnvModel {
    pub fn new(temporal: TemporalModel, od: OdMatrix, substrate: &SubstrateGraph) -> Result<Self> {
        if let Some(((u, v), _)) = od
            .entries()
            .find(|((u, v), _)| !substrate.contains(*u) || !substrate.contains(*v))
        {
            return Err(Error::Validation(format!("OD entry ({u}, {v}) outside the stop set")));
        }
        Ok(EnvModel {
            temporal,
            od,
            labels: substrate.labels(),
        })
    }

    /// Fits both components. Trips with stops outside `substrate` are skipped.
    pub fn fit(
        history: &[Request],
        substrate: &SubstrateGraph,
        slot_length: Minutes,
        kind: RegressorKind,
    ) -> Result<(Self, FitStats)> {
        let known: Vec<&Request> = history
            .iter()
            .filter(|r| substrate.contains(r.origin) && substrate.contains(r.destination) && r.origin != r.destination)
            .collect();
        let skipped = history.len() - known.len();
        if skipped > 0 {
            log::warn!("skipped {skipped} trips outside the stop set");
        }
        if known.is_empty() {
            return Err(Error::Fit("empty history".into()));
        }
        if !(slot_length > 0.0 && slot_length.is_finite()) {
            return Err(Error::Validation(format!("slot length {slot_length} must be positive")));
        }
        let slot = |t: Minutes| (t / slot_length).floor() as i64;
        let lo = known.iter().map(|r| slot(r.issue_time)).min().unwrap_or(0);
        let hi = known.iter().map(|r| slot(r.issue_time)).max().unwrap_or(0);
        let mut per_slot = vec![0.0; (hi - lo + 1) as usize];
        for r in &known {
            per_slot[(slot(r.issue_time) - lo) as usize] += 1.0;
        }
        let counts: Vec<(i64, f64)> = per_slot
            .iter()
            .enumerate()
            .map(|(i, &c)| (lo + i as i64, c))
            .collect();
        let temporal = TemporalModel::fit_counts(slot_length, &counts, kind, &SvrParams::default())?;
        let od = OdMatrix::from_trips(known.iter().copied())?;
        let stats = FitStats {
            used: known.len(),
            skipped,
            slots: counts.len(),
        };
        Ok((EnvModel::new(temporal, od, substrate)?, stats))
    }

    pub fn temporal(&self) -> &TemporalModel {
        &self.temporal
    }

    pub fn od(&self) -> &OdMatrix {
        &self.od
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Draws requests issued in `[from, to)`, sorted by issue time.
    pub fn sample_requests<R: Rng + ?Sized>(&self, from: Minutes, to: Minutes, rng: &mut R) -> Vec<Request> {
        let mut out = Vec::new();
        if !(to > from) {
            return out;
        }
        let len = self.temporal.slot_length;
        let mut slot = self.temporal.slot_of(from);
        loop {
            let slot_start = slot as f64 * len;
            if slot_start >= to {
                break;
            }
            let lo = from.max(slot_start);
            let hi = to.min(slot_start + len);
            if hi > lo {
                let expected = self.temporal.predict_count(slot) * (hi - lo) / len;
                let whole = expected.floor();
                let count = whole as usize + usize::from(rng.gen::<f64>() < expected - whole);
                for _ in 0..count {
                    let (origin, destination) = self.od.sample(rng);
                    let issue_time = rng.gen_range(lo..hi);
                    out.push(Request {
                        origin,
                        destination,
                        issue_time,
                    });
                }
            }
            slot += 1;
        }
        out.sort_by(|a, b| a.issue_time.total_cmp(&b.issue_time));
        out
    }

    /// Serialises the model to the versioned text format.
    pub fn to_text(&self, substrate: &SubstrateGraph) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_TAG}");
        let _ = writeln!(s, "slot_length {}", self.temporal.slot_length);
        let _ = writeln!(s, "regressor {}", self.temporal.kind());
        match &self.temporal.regressor {
            Regressor::Linear { weights } => {
                let w: Vec<String> = weights.iter().map(f64::to_string).collect();
                let _ = writeln!(s, "weights {}", w.join(" "));
            }
            Regressor::SlotMean { means, fallback } => {
                let _ = writeln!(s, "fallback {fallback}");
                let m: Vec<String> = means
                    .iter()
                    .map(|m| m.map_or_else(|| "-".to_string(), |v| v.to_string()))
                    .collect();
                let _ = writeln!(s, "means {}", m.join(" "));
            }
        }
        let labels: Vec<String> = self.labels.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "stops {}", labels.join(" "));
        for ((u, v), p) in self.od.entries() {
            let _ = writeln!(s, "od {} {} {}", substrate.stop(u).label, substrate.stop(v).label, p);
        }
        s
    }

    pub fn save(&self, path: &Path, substrate: &SubstrateGraph) -> Result<()> {
        std::fs::write(path, self.to_text(substrate)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, substrate: &SubstrateGraph) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, substrate).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses the text format; fails if the stop labels differ from `substrate`.
    pub fn from_text(text: &str, substrate: &SubstrateGraph) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, tag)) if tag == FORMAT_TAG => {}
            _ => return Err(bad(1, "missing model header")),
        }
        let mut slot_length = None;
        let mut kind = None;
        let mut weights = None;
        let mut means = None;
        let mut fallback = None;
        let mut labels = None;
        let mut od = Vec::new();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(no, &format!("bad number {s:?}")));
            match key {
                "slot_length" => slot_length = Some(num(rest)?),
                "regressor" => kind = Some(rest.parse::<RegressorKind>().map_err(|_| bad(no, "unknown regressor"))?),
                "weights" => {
                    let w = rest.split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
                    let arr: [f64; N_FEATURES] = w.try_into().map_err(|_| bad(no, "wrong weight count"))?;
                    weights = Some(arr);
                }
                "fallback" => fallback = Some(num(rest)?),
                "means" => {
                    let m = rest
                        .split_whitespace()
                        .map(|s| if s == "-" { Ok(None) } else { num(s).map(Some) })
                        .collect::<Result<Vec<_>>>()?;
                    means = Some(m);
                }
                "stops" => {
                    let l = rest
                        .split_whitespace()
                        .map(|s| s.parse::<u32>().map_err(|_| bad(no, "bad stop label")))
                        .collect::<Result<Vec<_>>>()?;
                    labels = Some(l);
                }
                "od" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [u, v, p] = f[..] else {
                        return Err(bad(no, "od line needs 3 fields"));
                    };
                    let id = |s: &str| {
                        s.parse::<u32>()
                            .ok()
                            .and_then(|l| substrate.id_of(l))
                            .ok_or_else(|| Error::Validation(format!("model stop {s} not in the stop set")))
                    };
                    od.push(((id(u)?, id(v)?), num(p)?));
                }
                other => return Err(bad(no, &format!("unknown key {other:?}"))),
            }
        }
        let labels = labels.ok_or_else(|| bad(0, "missing stops line"))?;
        let mut expected = substrate.labels();
        let mut got = labels.clone();
        expected.sort_unstable();
        got.sort_unstable();
        if expected != got {
            return Err(Error::Validation(
                "model was trained on a different stop set".into(),
            ));
        }
        let slot_length = slot_length.ok_or_else(|| bad(0, "missing slot_length"))?;
        let regressor = match kind.ok_or_else(|| bad(0, "missing regressor"))? {
            RegressorKind::LinearSvr => Regressor::Linear {
                weights: weights.ok_or_else(|| bad(0, "missing weights"))?,
            },
            RegressorKind::SlotMean => Regressor::SlotMean {
                means: means.ok_or_else(|| bad(0, "missing means"))?,
                fallback: fallback.ok_or_else(|| bad(0, "missing fallback"))?,
            },
        };
        Ok(EnvModel {
            temporal: TemporalModel { slot_length, regressor },
            od: OdMatrix::from_weights(od)?,
            labels: substrate.labels(),
        })
    }
}
