//! `od2n` command line: train a demand model, run simulations, compare runs.
//!
//! Settings are layered: command-line flags, then `OD2N_SEED` for the seed,
//! then the `--config` file (`key = value` per line, keys are flag names),
//! then the `--large-scale` preset, then built-in defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use od2n_core::envmodel::{EnvModel, RegressorKind};
use od2n_core::metrics::{SimReport, Summary};
use od2n_core::planner::{Budget, MctsParams, MctsPlanner, Planner, PlanningState, RandomPlanner, RootChoice};
use od2n_core::simulator::{EventStream, NdjsonProgress, NoObserver, SimConfig, SimObserver, Simulation};
use od2n_core::substrate::{load_stops, StopFormat, StopId, SubstrateGraph};
use od2n_core::trips::{format_timestamp, parse_timestamp, read_trips};
use od2n_core::{seeded_rng, Minutes, SimRng};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const SAMPLE_STREAM: u64 = 0x5a4d_504c_4500_0001;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<od2n_core::Error> for CliError {
    fn from(e: od2n_core::Error) -> Self {
        use od2n_core::Error as E;
        match e {
            E::Parse { .. } | E::Validation(_) | E::Format(_) => CliError::Validation(e.to_string()),
            E::Fit(_) | E::Domain(_) | E::Contract(_) | E::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "od2n", version, about = "Online design of dynamic bus networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the demand model on historical trips.
    Train(TrainArgs),
    /// Run the online loop over a trip replay window.
    Simulate(SimulateArgs),
    /// Compare finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub trips: PathBuf,
    #[arg(long)]
    pub stops: PathBuf,
    /// Where to write the model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub slot_minutes: f64,
    /// linear-svr or slot-mean
    #[arg(long, default_value = "linear-svr")]
    pub regressor: String,
}

#[derive(Debug, Args, Default)]
pub struct SimulateArgs {
    /// Flat `key = value` file; keys are flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trips: Option<PathBuf>,
    #[arg(long)]
    pub stops: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Fleet size, or a comma-separated list for a sweep.
    #[arg(long)]
    pub fleet: Option<String>,
    #[arg(long)]
    pub buffer_min: Option<f64>,
    #[arg(long)]
    pub bus_speed: Option<f64>,
    #[arg(long)]
    pub car_speed: Option<f64>,
    #[arg(long)]
    pub walk_speed: Option<f64>,
    /// Longest walk at either end, minutes, or `none`.
    #[arg(long)]
    pub max_walk_min: Option<String>,
    /// Window start, `YYYY-MM-DDTHH:MM[:SS]`; defaults to the first trip.
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long)]
    pub end: Option<String>,
    #[arg(long)]
    pub duration_min: Option<f64>,
    /// Run until the trips are exhausted instead of stopping at the end time.
    #[arg(long)]
    pub endless: bool,
    /// Fraction of trips replayed, drawn with the run seed.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    #[arg(long)]
    pub max_wait: Option<String>,
    #[arg(long)]
    pub max_transfers: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mcts or random
    #[arg(long)]
    pub planner: Option<String>,
    #[arg(long)]
    pub simulations: Option<usize>,
    /// Wall-clock budget per decision; replaces the simulation count.
    #[arg(long)]
    pub time_budget_ms: Option<u64>,
    #[arg(long)]
    pub exploration: Option<f64>,
    #[arg(long)]
    pub rollout_depth: Option<usize>,
    /// mean, visits or max
    #[arg(long)]
    pub root_choice: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Nearest candidate stops considered per decision, or `none`.
    #[arg(long)]
    pub max_candidates: Option<String>,
    /// Write progress.ndjson with one record per this many minutes.
    #[arg(long)]
    pub progress_every: Option<f64>,
    /// Write a per-simulation search trace (trace.csv).
    #[arg(long)]
    pub trace: bool,
    /// Preset for the 4-hour NYC replay: fleets 5..50, 20% sample, B = 30.
    #[arg(long)]
    pub large_scale: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or parents of fleet_* run directories.
    #[arg(required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Where to write the comparison CSV.
    #[arg(long, default_value = "report.csv")]
    pub csv: PathBuf,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let kind: RegressorKind = args.regressor.parse()?;
    let substrate = load_stops(&args.stops, None, SimConfig::default().bus_speed_kmh)?;
    let load = read_trips(&args.trips, &substrate)?;
    println!(
        "read {} rows: {} trips kept, {} dropped ({} same zone, {} unknown zone, {} malformed)",
        load.rows,
        load.requests.len(),
        load.dropped(),
        load.same_zone,
        load.unknown_zone,
        load.malformed
    );
    if load.rows > 0 && load.dropped() > 0 {
        eprintln!(
            "warning: dropped {:.1}% of rows",
            100.0 * load.dropped() as f64 / load.rows as f64
        );
    }
    let (model, stats) = EnvModel::fit(&load.requests, &substrate, args.slot_minutes, kind)?;
    model.save(&args.out, &substrate)?;
    println!(
        "fitted {} over {} slots of {} min, {} OD pairs -> {}",
        kind,
        stats.slots,
        args.slot_minutes,
        model.od().len(),
        args.out.display()
    );
    Ok(())
}

type Layer = BTreeMap<String, String>;

const KEYS: &[&str] = &[
    "trips",
    "stops",
    "model",
    "out-dir",
    "large-scale",
    "fleet",
    "buffer-min",
    "bus-speed",
    "car-speed",
    "walk-speed",
    "max-walk-min",
    "start",
    "end",
    "duration-min",
    "endless",
    "sample-fraction",
    "max-wait",
    "max-transfers",
    "seed",
    "planner",
    "simulations",
    "time-budget-ms",
    "exploration",
    "rollout-depth",
    "root-choice",
    "workers",
    "max-candidates",
    "progress-every",
    "trace",
];

fn defaults() -> Layer {
    [
        ("fleet", "5"),
        ("buffer-min", "30"),
        ("bus-speed", "17.3"),
        ("car-speed", "11.4"),
        ("walk-speed", "4.3"),
        ("max-walk-min", "0"),
        ("duration-min", "240"),
        ("endless", "false"),
        ("sample-fraction", "1"),
        ("max-wait", "none"),
        ("max-transfers", "none"),
        ("seed", "42"),
        ("planner", "mcts"),
        ("simulations", "300"),
        ("exploration", "2"),
        ("rollout-depth", "5"),
        ("root-choice", "mean"),
        ("workers", "1"),
        ("max-candidates", "none"),
        ("trace", "false"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn large_scale_preset() -> Layer {
    [
        ("fleet", "5,10,20,30,40,50"),
        ("sample-fraction", "0.2"),
        ("start", "2024-03-01T09:00"),
        ("duration-min", "240"),
        ("buffer-min", "30"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Parses a flat `key = value` file. `#` starts a comment.
pub fn read_config_file(path: &Path) -> CliResult<Layer> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut layer = Layer::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Validation(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            )));
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Validation(format!(
                "{}:{}: unknown key {key:?}",
                path.display(),
                i + 1
            )));
        }
        layer.insert(key, v.trim().to_string());
    }
    Ok(layer)
}

fn flag_layer(a: &SimulateArgs) -> Layer {
    let mut l = Layer::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            l.insert(k.to_string(), v);
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    put("trips", path(&a.trips));
    put("stops", path(&a.stops));
    put("model", path(&a.model));
    put("out-dir", path(&a.out_dir));
    put("fleet", a.fleet.clone());
    put("buffer-min", a.buffer_min.map(|v| v.to_string()));
    put("bus-speed", a.bus_speed.map(|v| v.to_string()));
    put("car-speed", a.car_speed.map(|v| v.to_string()));
    put("walk-speed", a.walk_speed.map(|v| v.to_string()));
    put("max-walk-min", a.max_walk_min.clone());
    put("start", a.start.clone());
    put("end", a.end.clone());
    put("duration-min", a.duration_min.map(|v| v.to_string()));
    put("endless", a.endless.then(|| "true".to_string()));
    put("sample-fraction", a.sample_fraction.map(|v| v.to_string()));
    put("max-wait", a.max_wait.clone());
    put("max-transfers", a.max_transfers.clone());
    put("seed", a.seed.map(|v| v.to_string()));
    put("planner", a.planner.clone());
    put("simulations", a.simulations.map(|v| v.to_string()));
    put("time-budget-ms", a.time_budget_ms.map(|v| v.to_string()));
    put("exploration", a.exploration.map(|v| v.to_string()));
    put("rollout-depth", a.rollout_depth.map(|v| v.to_string()));
    put("root-choice", a.root_choice.clone());
    put("workers", a.workers.map(|v| v.to_string()));
    put("max-candidates", a.max_candidates.clone());
    put("progress-every", a.progress_every.map(|v| v.to_string()));
    put("trace", a.trace.then(|| "true".to_string()));
    l
}

/// Merged settings for a `simulate` invocation, before per-fleet expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub trips: PathBuf,
    pub stops: PathBuf,
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub config_file: Option<PathBuf>,
    pub fleets: Vec<usize>,
    pub run: RunConfig,
}

/// Everything that determines one run's result. Hashed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fleet: usize,
    pub buffer_min: f64,
    pub bus_speed: f64,
    pub car_speed: f64,
    pub walk_speed: f64,
    pub max_walk_min: Option<f64>,
    /// Explicit window start; `None` means the first trip.
    pub start: Option<String>,
    pub end: Option<String>,
    pub duration_min: f64,
    pub endless: bool,
    pub sample_fraction: f64,
    pub max_wait: Option<f64>,
    pub max_transfers: Option<usize>,
    pub seed: u64,
    pub planner: String,
    pub simulations: usize,
    pub time_budget_ms: Option<u64>,
    pub exploration: f64,
    pub rollout_depth: usize,
    pub root_choice: String,
    pub workers: usize,
    pub max_candidates: Option<usize>,
    pub progress_every: Option<f64>,
    pub trace: bool,
}

fn get<'a>(m: &'a Layer, key: &str) -> Option<&'a str> {
    m.get(key).map(String::as_str)
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Validation(format!("invalid value {v:?} for {key}")))
}

fn req<T: std::str::FromStr>(m: &Layer, key: &str) -> CliResult<T> {
    let v = get(m, key).ok_or_else(|| CliError::Validation(format!("missing setting {key}")))?;
    parse_val(key, v)
}

fn opt<T: std::str::FromStr>(m: &Layer, key: &str) -> CliResult<Option<T>> {
    match get(m, key) {
        None => Ok(None),
        Some(v) if v.eq_ignore_ascii_case("none") => Ok(None),
        Some(v) => parse_val(key, v).map(Some),
    }
}

fn flag(m: &Layer, key: &str) -> CliResult<bool> {
    Ok(opt::<bool>(m, key)?.unwrap_or(false))
}

/// Merges the setting layers. `env_seed` is the value of `OD2N_SEED`.
pub fn resolve_settings(args: &SimulateArgs, env_seed: Option<&str>) -> CliResult<Settings> {
    let mut merged = defaults();
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => Layer::new(),
    };
    let large = args.large_scale || flag(&file, "large-scale").unwrap_or(false);
    if large {
        merged.extend(large_scale_preset());
    }
    merged.extend(file);
    if let Some(s) = env_seed.map(str::trim).filter(|s| !s.is_empty()) {
        merged.insert("seed".into(), s.to_string());
    }
    merged.extend(flag_layer(args));

    let path = |key: &str| -> CliResult<PathBuf> {
        get(&merged, key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    };
    let fleets: Vec<usize> = req::<String>(&merged, "fleet")?
        .split(',')
        .map(|f| parse_val::<usize>("fleet", f))
        .collect::<CliResult<_>>()?;
    if fleets.is_empty() || fleets.contains(&0) {
        return Err(CliError::Validation("fleet sizes must be positive".into()));
    }
    let run = RunConfig {
        fleet: fleets[0],
        buffer_min: req(&merged, "buffer-min")?,
        bus_speed: req(&merged, "bus-speed")?,
        car_speed: req(&merged, "car-speed")?,
        walk_speed: req(&merged, "walk-speed")?,
        max_walk_min: opt(&merged, "max-walk-min")?,
        start: get(&merged, "start").map(str::to_string),
        end: get(&merged, "end").map(str::to_string),
        duration_min: req(&merged, "duration-min")?,
        endless: flag(&merged, "endless")?,
        sample_fraction: req(&merged, "sample-fraction")?,
        max_wait: opt(&merged, "max-wait")?,
        max_transfers: opt(&merged, "max-transfers")?,
        seed: req(&merged, "seed")?,
        planner: req(&merged, "planner")?,
        simulations: req(&merged, "simulations")?,
        time_budget_ms: opt(&merged, "time-budget-ms")?,
        exploration: req(&merged, "exploration")?,
        rollout_depth: req(&merged, "rollout-depth")?,
        root_choice: req(&merged, "root-choice")?,
        workers: req(&merged, "workers")?,
        max_candidates: opt(&merged, "max-candidates")?,
        progress_every: opt(&merged, "progress-every")?,
        trace: flag(&merged, "trace")?,
    };
    if !(run.sample_fraction > 0.0 && run.sample_fraction <= 1.0) {
        return Err(CliError::Validation(format!(
            "sample fraction {} must be in (0, 1]",
            run.sample_fraction
        )));
    }
    if !matches!(run.planner.as_str(), "mcts" | "random") {
        return Err(CliError::Validation(format!("unknown planner {:?}", run.planner)));
    }
    run.root_choice.parse::<RootChoice>()?;
    if run.planner == "mcts" && get(&merged, "model").is_none() {
        return Err(CliError::Usage("--model is required with the mcts planner".into()));
    }
    Ok(Settings {
        trips: path("trips")?,
        stops: path("stops")?,
        model: get(&merged, "model").map(PathBuf::from),
        out_dir: path("out-dir")?,
        config_file: args.config.clone(),
        fleets,
        run,
    })
}

fn parse_time(key: &str, s: &str) -> CliResult<Minutes> {
    parse_timestamp(s).ok_or_else(|| CliError::Validation(format!("invalid {key} timestamp {s:?}")))
}

impl RunConfig {
    /// Core simulator configuration for a replay starting at `first_trip` when no start is set.
    pub fn sim_config(&self, first_trip: Option<Minutes>) -> CliResult<SimConfig> {
        let start = match &self.start {
            Some(s) => parse_time("start", s)?,
            None => first_trip.map(f64::floor).unwrap_or(0.0),
        };
        let end = match (&self.end, self.endless) {
            (_, true) => None,
            (Some(e), false) => Some(parse_time("end", e)?),
            (None, false) => Some(start + self.duration_min),
        };
        let budget = match self.time_budget_ms {
            Some(ms) => Budget::WallClock(Duration::from_millis(ms)),
            None => Budget::Simulations(self.simulations),
        };
        let config = SimConfig {
            fleet_size: self.fleet,
            buffer: self.buffer_min,
            bus_speed_kmh: self.bus_speed,
            car_speed_kmh: self.car_speed,
            walk_speed_kmh: self.walk_speed,
            max_walk: self.max_walk_min,
            start,
            end,
            max_wait: self.max_wait,
            max_transfers: self.max_transfers,
            seed: self.seed,
            max_candidates: self.max_candidates,
            mcts: MctsParams {
                exploration: self.exploration,
                rollout_depth: self.rollout_depth,
                budget,
                root_choice: self.root_choice.parse()?,
                workers: self.workers,
                trace: self.trace,
            },
            progress_every: self.progress_every,
        };
        config.validate()?;
        Ok(config)
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Hash of everything but the seed; runs sharing it are replicates.
    pub fn key(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex(&Sha256::digest(c.canonical_json().as_bytes()))[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| io_err(path, e))?;
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub config_hash: String,
    pub config_key: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config_hash: String,
    pub config_key: String,
    pub planner: String,
    pub seed: u64,
    pub window_start: String,
    pub window_end: Option<String>,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes every search simulation of every decision as CSV rows.
struct TracingPlanner<W: std::io::Write> {
    inner: MctsPlanner,
    out: W,
    decision: usize,
}

impl<W: std::io::Write> Planner for TracingPlanner<W> {
    fn plan(&mut self, state: &PlanningState<'_>, rng: &mut SimRng) -> od2n_core::Result<StopId> {
        let action = self.inner.plan(state, rng)?;
        let sub = state.teg.substrate();
        for t in self.inner.last_trace() {
            let actions: Vec<String> = t.actions.iter().map(|&s| sub.stop(s).label.to_string()).collect();
            let _ = writeln!(self.out, "{},{},{},{},{}", self.decision, t.worker, t.sim, actions.join(" "), t.reward);
        }
        self.decision += 1;
        Ok(action)
    }

    fn name(&self) -> &'static str {
        "mcts"
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let env_seed = std::env::var("OD2N_SEED").ok();
    let settings = resolve_settings(args, env_seed.as_deref())?;
    fs::create_dir_all(&settings.out_dir).map_err(|e| io_err(&settings.out_dir, e))?;

    let mut inputs = vec![
        digest("trips", &settings.trips)?,
        digest("stops", &settings.stops)?,
    ];
    if let Some(m) = &settings.model {
        inputs.push(digest("model", m)?);
    }
    if let Some(c) = &settings.config_file {
        inputs.push(digest("config", c)?);
    }

    let sweep = settings.fleets.len() > 1;
    let runs: Vec<(RunConfig, PathBuf)> = settings
        .fleets
        .iter()
        .map(|&fleet| {
            let run = RunConfig {
                fleet,
                ..settings.run.clone()
            };
            let dir = if sweep {
                settings.out_dir.join(format!("fleet_{fleet}"))
            } else {
                settings.out_dir.clone()
            };
            (run, dir)
        })
        .collect();

    let mut manifests = Vec::new();
    for (run, dir) in &runs {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let m = RunManifest {
            tool: "od2n".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: "running".into(),
            error: None,
            config_hash: run.hash(),
            config_key: run.key(),
            seed: run.seed,
            config: run.clone(),
            inputs: inputs.clone(),
            outputs: Vec::new(),
        };
        m.write(dir)?;
        manifests.push(m);
    }

    let result = simulate_all(&settings, &runs, &mut manifests);
    if let Err(e) = &result {
        for (m, (_, dir)) in manifests.iter_mut().zip(&runs) {
            if m.status == "running" {
                m.status = "failed".into();
                m.error = Some(e.to_string());
                let _ = m.write(dir);
            }
        }
    }
    result
}

fn digest(role: &str, path: &Path) -> CliResult<InputDigest> {
    Ok(InputDigest {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

fn simulate_all(settings: &Settings, runs: &[(RunConfig, PathBuf)], manifests: &mut [RunManifest]) -> CliResult<()> {
    let base = &settings.run;
    let substrate = Arc::new(load_stops(&settings.stops, None::<StopFormat>, base.bus_speed)?);
    let model = match &settings.model {
        Some(p) => Some(Arc::new(EnvModel::load(p, &substrate)?)),
        None => None,
    };
    let load = read_trips(&settings.trips, &substrate)?;
    if load.dropped() > 0 {
        eprintln!(
            "warning: dropped {} of {} trip rows ({} same zone, {} unknown zone, {} malformed)",
            load.dropped(),
            load.rows,
            load.same_zone,
            load.unknown_zone,
            load.malformed
        );
    }
    let first_trip = load.requests.first().map(|r| r.issue_time);

    for ((run, dir), manifest) in runs.iter().zip(manifests.iter_mut()) {
        let config = run.sim_config(first_trip)?;
        let stream = replay_window(&load.requests, &config, run.sample_fraction);
        let report = simulate_one(run, &config, substrate.clone(), model.clone(), &stream, dir)?;
        let summary = SummaryFile {
            config_hash: run.hash(),
            config_key: run.key(),
            planner: run.planner.clone(),
            seed: run.seed,
            window_start: format_timestamp(config.start),
            window_end: config.end.map(format_timestamp),
            summary: report.summary.clone(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        report.write_csvs(dir)?;
        let s = &report.summary;
        println!(
            "fleet {:>3}: issued {} served {} ({}) decisions {} -> {}",
            run.fleet,
            s.issued,
            s.served,
            s.service_rate.map_or("n/a".to_string(), |r| format!("{:.2}%", 100.0 * r)),
            s.decisions,
            dir.display()
        );
        manifest.status = "ok".into();
        manifest.outputs = [
            "summary.json",
            "requests.csv",
            "unserved_timeseries.csv",
            "ecdf_waiting.csv",
            "ecdf_spacing.csv",
            "heatmap_in_vehicle.csv",
            "heatmap_transfers.csv",
        ]
        .iter()
        .map(|f| dir.join(f))
        .chain(run.progress_every.map(|_| dir.join("progress.ndjson")))
        .chain(run.trace.then(|| dir.join("trace.csv")))
        .collect();
        manifest.write(dir)?;
    }
    Ok(())
}

/// Trips inside the run window, thinned to `fraction` with the run seed.
pub fn replay_window(trips: &[od2n_core::router::Request], config: &SimConfig, fraction: f64) -> EventStream {
    let mut rng = seeded_rng(config.seed ^ SAMPLE_STREAM);
    let kept = trips
        .iter()
        .filter(|r| r.issue_time >= config.start && config.end.is_none_or(|e| r.issue_time <= e))
        .filter(|_| fraction >= 1.0 || rng.gen::<f64>() < fraction)
        .copied()
        .collect();
    EventStream::new(kept).expect("trips are sorted")
}

fn simulate_one(
    run: &RunConfig,
    config: &SimConfig,
    substrate: Arc<SubstrateGraph>,
    model: Option<Arc<EnvModel>>,
    stream: &EventStream,
    dir: &Path,
) -> CliResult<SimReport> {
    let sim = Simulation::new(config.clone(), substrate)?;
    let mut planner: Box<dyn Planner> = match run.planner.as_str() {
        "random" => Box::new(RandomPlanner),
        _ => {
            let model = model.ok_or_else(|| CliError::Usage("--model is required with the mcts planner".into()))?;
            let mcts = MctsPlanner::new(config.mcts, model)?;
            if run.trace {
                let path = dir.join("trace.csv");
                let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
                let _ = writeln!(f, "decision,worker,sim,actions,reward");
                Box::new(TracingPlanner {
                    inner: mcts,
                    out: f,
                    decision: 0,
                })
            } else {
                Box::new(mcts)
            }
        }
    };
    let mut observer: Box<dyn SimObserver> = match run.progress_every {
        Some(_) => {
            let path = dir.join("progress.ndjson");
            let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            Box::new(NdjsonProgress(std::io::BufWriter::new(f)))
        }
        None => Box::new(NoObserver),
    };
    let outcome = sim.run(stream, planner.as_mut(), observer.as_mut())?;
    if !outcome.audit.is_clean() {
        return Err(CliError::Runtime(format!("invariant audit failed: {:?}", outcome.audit)));
    }
    Ok(SimReport::from_outcome(&outcome)?)
}

/// Run directories under `path`: itself if it has a summary, else its children that do.
fn collect_runs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.join("summary.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
            let p = entry.map_err(|e| io_err(path, e))?.path();
            if p.join("summary.json").is_file() {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::Runtime(format!("{}: no summary.json found", path.display())));
    }
    Ok(found)
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((m, sd))
}

const REPORT_COLUMNS: &[(&str, fn(&Summary) -> Option<f64>)] = &[
    ("service_rate", |s| s.service_rate),
    ("avg_waiting", |s| s.avg_waiting),
    ("avg_in_vehicle", |s| s.avg_in_vehicle),
    ("avg_stretch_car", |s| s.avg_stretch_car),
    ("avg_stretch_walk", |s| s.avg_stretch_walk),
    ("avg_transfers", |s| s.avg_transfers),
    ("average_occupation", |s| Some(s.average_occupation)),
];

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    if args.runs.is_empty() {
        return Err(CliError::Usage("no run directories given".into()));
    }
    let mut groups: BTreeMap<(usize, String, String), Vec<SummaryFile>> = BTreeMap::new();
    for root in &args.runs {
        for dir in collect_runs(root)? {
            let path = dir.join("summary.json");
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let s: SummaryFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            groups
                .entry((s.summary.fleet_size, s.planner.clone(), s.config_key.clone()))
                .or_default()
                .push(s);
        }
    }

    let mut header = vec!["config_key".to_string(), "planner".into(), "fleet".into(), "runs".into()];
    for (name, _) in REPORT_COLUMNS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    let mut w = csv::Writer::from_path(&args.csv).map_err(|e| CliError::Runtime(format!("{}: {e}", args.csv.display())))?;
    w.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;

    println!(
        "{:<16} {:<7} {:>5} {:>4}  {}",
        "config",
        "planner",
        "fleet",
        "runs",
        REPORT_COLUMNS.iter().map(|c| format!("{:>20}", c.0)).collect::<String>()
    );
    for ((fleet, planner, key), runs) in &groups {
        let mut row = vec![key.clone(), planner.clone(), fleet.to_string(), runs.len().to_string()];
        let mut line = format!("{key:<16} {planner:<7} {fleet:>5} {:>4}  ", runs.len());
        for (_, get) in REPORT_COLUMNS {
            let values: Vec<f64> = runs.iter().filter_map(|r| get(&r.summary)).collect();
            match mean_sd(&values) {
                Some((m, sd)) => {
                    row.push(m.to_string());
                    row.push(sd.to_string());
                    line.push_str(&format!("{:>20}", format!("{m:.4} ± {sd:.4}")));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                    line.push_str(&format!("{:>20}", "n/a"));
                }
            }
        }
        w.write_record(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{line}");
    }
    w.flush().map_err(|e| io_err(&args.csv, e))?;
    Ok(())
}
