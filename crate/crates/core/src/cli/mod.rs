//! The `qtlab` command line: demonstrations, training, backtests, comparison
//! tables and the four-way ablation harness.
//!
//! Exit codes: 0 success, 1 internal error, 2 input or config error, 3 training failure.

mod config;

pub use config::{DataConfig, RunConfig, SynthSpec};

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{self, Ablation, Agent, AgentError, TrainLog, CHECKPOINT_FILE, REPLAY_FILE};
use crate::indicators::{generate_demonstrations, DualThrustPolicy};
use crate::market_data::{synth_series, write_csv, PriceSeries, SynthKind, SynthParams};
use crate::metrics::{format_table, FrequencyStats, MetricReport};
use crate::replay::{Episode, PrioritizedBuffer};
use crate::simulator::{run_policy, ConstantPolicy, Policy, RunResult, SimError};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

const DEMO_FORMAT: &str = "qtlab-demos";
const DEMO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn internal(message: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    pub fn training(message: impl fmt::Display) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::internal(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Sorts training-time errors into config problems and genuine failures.
fn train_error(e: AgentError) -> CliError {
    match e {
        AgentError::InvalidConfig(_)
        | AgentError::ObservationDim { .. }
        | AgentError::NoDemos
        | AgentError::Checkpoint(_)
        | AgentError::Sim(
            SimError::InsufficientData { .. }
            | SimError::InsufficientWarmup { .. }
            | SimError::InvalidConfig(_),
        )
        | AgentError::Replay(_) => CliError::input(e),
        AgentError::Io(_) => CliError::internal(e),
        _ => CliError::training(e),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qtlab",
    version,
    about = "Recurrent policy-gradient trading agent with demonstration replay"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    LongHold,
    ShortHold,
    DualThrust,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::LongHold => "Long&Hold",
            Baseline::ShortHold => "Short&Hold",
            Baseline::DualThrust => "DualThrust",
        }
    }

    fn policy(self) -> Box<dyn Policy> {
        match self {
            Baseline::LongHold => Box::new(ConstantPolicy(1)),
            Baseline::ShortHold => Box::new(ConstantPolicy(-1)),
            Baseline::DualThrust => Box::new(DualThrustPolicy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate Dual Thrust demonstration episodes on the training split.
    Demos(Common),
    /// Pretrain on demonstrations (if the mode uses them) and train online.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the config ablation mode.
        #[arg(long, value_parser = clap::builder::ValueParser::new(parse_ablation))]
        ablation: Option<Ablation>,
        /// Directory holding a previous run's checkpoint and replay buffer.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained agent or baseline strategies and report metrics.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Agent checkpoint to evaluate greedily.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline strategy; may be repeated.
        #[arg(long, value_enum)]
        baseline: Vec<Baseline>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Method name for the checkpoint row (defaults to the ablation label).
        #[arg(long)]
        name: Option<String>,
    },
    /// Merge metric files into one comparison table.
    Compare {
        /// Metric JSON files written by `backtest`.
        results: Vec<PathBuf>,
        /// Also write compare.txt and compare.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation mode and tabulate them against the baselines.
    Ablate(Common),
    /// Write a synthetic OHLC series as CSV.
    Synth {
        #[arg(long, value_parser = clap::builder::ValueParser::new(parse_synth_kind))]
        kind: SynthKind,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100.0)]
        base: f64,
        #[arg(long, default_value_t = 5.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 40.0)]
        period: f64,
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn parse_synth_kind(s: &str) -> Result<SynthKind, String> {
    s.parse()
        .map_err(|e: crate::market_data::DataError| e.to_string())
}

/// One row of a comparison: a method name and its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub tr: f64,
    pub sr: Option<f64>,
    pub vol: Option<f64>,
    pub mdd: f64,
    pub per_bar: FrequencyStats,
}

impl MethodResult {
    pub fn new(method: impl Into<String>, r: MetricReport) -> Self {
        Self {
            method: method.into(),
            tr: r.tr,
            sr: r.sr,
            vol: r.vol,
            mdd: r.mdd,
            per_bar: r.per_bar,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            tr: self.tr,
            sr: self.sr,
            vol: self.vol,
            mdd: self.mdd,
            per_bar: self.per_bar,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoFile {
    format: String,
    version: u32,
    episodes: Vec<Episode>,
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn config_hash(cfg: &RunConfig) -> String {
    hex_sha256(serde_json::to_string(cfg).unwrap_or_default().as_bytes())
}

fn input_record(path: &Path) -> Result<InputRecord, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(InputRecord {
        path: path.display().to_string(),
        sha256: hex_sha256(&bytes),
    })
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: Option<&RunConfig>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let mut records = Vec::new();
    if let Some(p) = cfg.and_then(|c| c.data.path.as_ref()) {
        records.push(input_record(p)?);
    }
    for p in inputs {
        records.push(input_record(p)?);
    }
    let manifest = Manifest {
        command,
        version: VERSION,
        seed: cfg.map_or(0, |c| c.seed),
        config_hash: cfg.map_or_else(String::new, config_hash),
        inputs: records,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
            })
            .collect(),
    };
    write_json(&dir.join(format!("manifest_{command}.json")), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    s.trim_matches('-').to_string()
}

pub fn write_demo_file(path: &Path, episodes: &[Episode]) -> Result<(), CliError> {
    write_json(
        path,
        &DemoFile {
            format: DEMO_FORMAT.into(),
            version: DEMO_VERSION,
            episodes: episodes.to_vec(),
        },
    )
}

pub fn read_demo_file(path: &Path) -> Result<Vec<Episode>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let file: DemoFile = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if file.format != DEMO_FORMAT || file.version != DEMO_VERSION {
        return Err(CliError::input(format!(
            "{}: not a version {DEMO_VERSION} demonstration file",
            path.display()
        )));
    }
    for ep in &file.episodes {
        ep.validate().map_err(CliError::input)?;
    }
    Ok(file.episodes)
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(&common.config)?.finalize(common.seed, common.out.clone())
}

fn report_for(run: &RunResult) -> Result<MetricReport, CliError> {
    MetricReport::from_run(run).map_err(CliError::input)
}

fn run_baseline(
    series: &PriceSeries,
    cfg: &RunConfig,
    baseline: Baseline,
) -> Result<RunResult, CliError> {
    run_policy(
        series,
        baseline.policy().as_mut(),
        &cfg.sim,
        &cfg.dual_thrust,
    )
    .map_err(CliError::input)
}

fn run_agent(series: &PriceSeries, cfg: &RunConfig, agent: &Agent) -> Result<RunResult, CliError> {
    if agent.shape().obs_dim != cfg.sim.observation_dim() {
        return Err(CliError::input(format!(
            "checkpoint expects {} observation values but the config produces {}",
            agent.shape().obs_dim,
            cfg.sim.observation_dim()
        )));
    }
    let mut policy = agent.greedy_policy();
    let run =
        run_policy(series, &mut policy, &cfg.sim, &cfg.dual_thrust).map_err(CliError::input)?;
    if let Some(e) = policy.take_error() {
        return Err(CliError::internal(e));
    }
    Ok(run)
}

/// Writes `metrics_<slug>.json` and `equity_<slug>.csv`; returns their paths.
fn write_result(
    dir: &Path,
    result: &MethodResult,
    run: &RunResult,
) -> Result<Vec<PathBuf>, CliError> {
    let s = slug(&result.method);
    let metrics = dir.join(format!("metrics_{s}.json"));
    write_json(&metrics, result)?;
    let equity = dir.join(format!("equity_{s}.csv"));
    let mut w = BufWriter::new(File::create(&equity).map_err(|e| CliError::io(&equity, e))?);
    run.write_equity_csv(&mut w)
        .map_err(|e| CliError::io(&equity, e))?;
    w.flush().map_err(|e| CliError::io(&equity, e))?;
    Ok(vec![metrics, equity])
}

fn print_result(result: &MethodResult) -> Result<(), CliError> {
    println!(
        "{}",
        serde_json::to_string(result).map_err(CliError::internal)?
    );
    Ok(())
}

pub fn cmd_demos(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (train, _) = cfg.load_split()?;
    let episodes =
        generate_demonstrations(&train, &cfg.dual_thrust, &cfg.sim).map_err(CliError::input)?;
    let run = run_baseline(&train, &cfg, Baseline::DualThrust)?;
    let result = MethodResult::new(Baseline::DualThrust.label(), report_for(&run)?);

    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    let demo_path = dir.join("demos.json");
    write_demo_file(&demo_path, &episodes)?;
    let metrics_path = dir.join("demos_metrics.json");
    write_json(&metrics_path, &result)?;
    write_manifest(
        &dir,
        "demos",
        Some(&cfg),
        &[],
        &[demo_path.clone(), metrics_path],
    )?;

    println!(
        "demo episodes: {} -> {}",
        episodes.len(),
        demo_path.display()
    );
    print_result(&result)
}

fn write_log(path: &Path, log: &[TrainLog], append: bool) -> Result<(), CliError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for entry in log {
        let line = serde_json::to_string(entry).map_err(CliError::internal)?;
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Trains one agent under `cfg` into `dir`; returns it with the demo file used.
fn train_into(
    cfg: &RunConfig,
    dir: &Path,
    demos: Option<(Vec<Episode>, PathBuf)>,
) -> Result<Agent, CliError> {
    let (train, _) = cfg.load_split()?;
    ensure_dir(dir)?;
    let (episodes, inputs) = match demos {
        Some((eps, path)) => (eps, vec![path]),
        None => (Vec::new(), Vec::new()),
    };
    let outcome = agent::train(
        &train,
        &cfg.sim,
        &cfg.dual_thrust,
        cfg.train.clone(),
        cfg.buffer.clone(),
        cfg.ablation,
        episodes,
        Some(dir),
    )
    .map_err(train_error)?;
    let log_path = dir.join("train_log.jsonl");
    write_log(&log_path, &outcome.log, false)?;
    write_manifest(
        dir,
        "train",
        Some(cfg),
        &inputs,
        &[dir.join(CHECKPOINT_FILE), dir.join(REPLAY_FILE), log_path],
    )?;
    Ok(outcome.agent)
}

fn demos_for(cfg: &RunConfig) -> Result<Option<(Vec<Episode>, PathBuf)>, CliError> {
    if !cfg.ablation.uses_demos() {
        return Ok(None);
    }
    let path = cfg.demo_path();
    if !path.exists() {
        return Err(CliError::input(format!(
            "ablation {} needs the demonstration file {} (generate it with `qtlab demos`)",
            cfg.ablation,
            path.display()
        )));
    }
    Ok(Some((read_demo_file(&path)?, path)))
}

pub fn cmd_train(
    common: &Common,
    ablation: Option<Ablation>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut raw = RunConfig::load(&common.config)?;
    if let Some(a) = ablation {
        raw.ablation = a;
    }
    let cfg = raw.finalize(common.seed, common.out.clone())?;
    let dir = cfg.out_dir();

    let Some(from) = resume else {
        let demos = demos_for(&cfg)?;
        let agent = train_into(&cfg, &dir, demos)?;
        println!(
            "trained {} for {} updates -> {}",
            cfg.ablation,
            agent.step_count(),
            dir.join(CHECKPOINT_FILE).display()
        );
        return Ok(());
    };

    let agent = Agent::load(from.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::input(format!("{}: {e}", from.display())))?;
    let buffer = PrioritizedBuffer::load(from.join(REPLAY_FILE))
        .map_err(|e| CliError::input(format!("{}: {e}", from.display())))?;
    let mut agent = agent;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = agent.config().seed;
    agent.set_config(train_cfg).map_err(train_error)?;
    let (train, _) = cfg.load_split()?;
    ensure_dir(&dir)?;
    let outcome = agent::resume(
        &train,
        &cfg.sim,
        &cfg.dual_thrust,
        agent,
        buffer,
        Some(&dir),
    )
    .map_err(train_error)?;
    let log_path = dir.join("train_log.jsonl");
    write_log(&log_path, &outcome.log, true)?;
    write_manifest(
        &dir,
        "train",
        Some(&cfg),
        &[],
        &[dir.join(CHECKPOINT_FILE), dir.join(REPLAY_FILE), log_path],
    )?;
    println!(
        "resumed to {} updates -> {}",
        outcome.agent.step_count(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn cmd_backtest(
    common: &Common,
    checkpoint: Option<&Path>,
    baselines: &[Baseline],
    split: Split,
    name: Option<&str>,
) -> Result<(), CliError> {
    if checkpoint.is_none() && baselines.is_empty() {
        return Err(CliError::input(
            "backtest needs --checkpoint or at least one --baseline",
        ));
    }
    let cfg = load_config(common)?;
    let (train, test) = cfg.load_split()?;
    let series = match split {
        Split::Train => &train,
        Split::Test => &test,
    };
    let dir = cfg.out_dir();
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    let mut rows = Vec::new();

    if let Some(path) = checkpoint {
        if !path.exists() {
            return Err(CliError::input(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let agent =
            Agent::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let run = run_agent(series, &cfg, &agent)?;
        let label = name.unwrap_or(cfg.ablation.label());
        rows.push((MethodResult::new(label, report_for(&run)?), run));
        inputs.push(path.to_path_buf());
    }
    for &b in baselines {
        let run = run_baseline(series, &cfg, b)?;
        rows.push((MethodResult::new(b.label(), report_for(&run)?), run));
    }

    ensure_dir(&dir)?;
    for (result, run) in &rows {
        outputs.extend(write_result(&dir, result, run)?);
        print_result(result)?;
    }
    write_manifest(&dir, "backtest", Some(&cfg), &inputs, &outputs)
}

/// Names made unique by suffixing repeats with ` (2)`, ` (3)`, ...
pub fn disambiguate(names: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(names.len());
    for name in names {
        let mut candidate = name.clone();
        let mut k = 1;
        while out.contains(&candidate) {
            k += 1;
            candidate = format!("{name} ({k})");
        }
        out.push(candidate);
    }
    out
}

pub fn comparison_csv(rows: &[(String, MetricReport)]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("Methods,Tr(%),Sr,Vol,Mdd(%)\n");
    for (name, r) in rows {
        let quoted = if name.contains([',', '"']) {
            format!("\"{}\"", name.replace('"', "\"\""))
        } else {
            name.clone()
        };
        out.push_str(&format!(
            "{quoted},{},{},{},{}\n",
            100.0 * r.tr,
            opt(r.sr),
            opt(r.vol),
            100.0 * r.mdd
        ));
    }
    out
}

fn write_comparison(
    dir: &Path,
    stem: &str,
    rows: &[(String, MetricReport)],
) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(dir)?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, format_table(rows)).map_err(|e| CliError::io(&txt, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, comparison_csv(rows)).map_err(|e| CliError::io(&csv, e))?;
    Ok(vec![txt, csv])
}

pub fn cmd_compare(results: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if results.is_empty() {
        return Err(CliError::input(
            "usage: qtlab compare <RESULT.json>... [--out DIR]",
        ));
    }
    let mut parsed = Vec::new();
    for path in results {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let r: MethodResult = serde_json::from_str(&text).map_err(|e| {
            CliError::input(format!("{}: malformed result file: {e}", path.display()))
        })?;
        parsed.push(r);
    }
    let names = disambiguate(&parsed.iter().map(|r| r.method.clone()).collect::<Vec<_>>());
    let rows: Vec<(String, MetricReport)> = names
        .into_iter()
        .zip(parsed.iter().map(MethodResult::report))
        .collect();
    print!("{}", format_table(&rows));
    if let Some(dir) = out {
        let outputs = write_comparison(dir, "compare", &rows)?;
        write_manifest(dir, "compare", None, results, &outputs)?;
    }
    Ok(())
}

pub fn cmd_ablate(common: &Common) -> Result<(), CliError> {
    let base = RunConfig::load(&common.config)?;
    let first = base.clone().finalize(common.seed, common.out.clone())?;
    let dir = first.out_dir();
    ensure_dir(&dir)?;
    let (train, test) = first.load_split()?;

    let demos =
        generate_demonstrations(&train, &first.dual_thrust, &first.sim).map_err(CliError::input)?;
    let demo_path = dir.join("demos.json");
    write_demo_file(&demo_path, &demos)?;

    let mut rows: Vec<MethodResult> = Vec::new();
    let mut outputs = vec![demo_path.clone()];
    for mode in Ablation::ALL {
        let mut raw = base.clone();
        raw.ablation = mode;
        if mode.uses_bc() && raw.train.lambda2 <= 0.0 {
            return Err(CliError::input(
                "ablation harness needs train.lambda2 > 0 for the cloning modes",
            ));
        }
        let cfg = raw.finalize(common.seed, Some(dir.join(mode.as_str())))?;
        let mode_demos = mode
            .uses_demos()
            .then(|| (demos.clone(), demo_path.clone()));
        let agent = train_into(&cfg, &cfg.out_dir(), mode_demos)?;
        let run = run_agent(&test, &cfg, &agent)?;
        let result = MethodResult::new(mode.label(), report_for(&run)?);
        outputs.extend(write_result(&dir, &result, &run)?);
        eprintln!(
            "{}: {} updates, test Tr {:.4}%",
            mode,
            agent.step_count(),
            100.0 * result.tr
        );
        rows.push(result);
    }
    for b in [
        Baseline::LongHold,
        Baseline::ShortHold,
        Baseline::DualThrust,
    ] {
        let run = run_baseline(&test, &first, b)?;
        let result = MethodResult::new(b.label(), report_for(&run)?);
        outputs.extend(write_result(&dir, &result, &run)?);
        rows.push(result);
    }
    let table: Vec<(String, MetricReport)> = rows
        .iter()
        .map(|r| (r.method.clone(), r.report()))
        .collect();
    outputs.extend(write_comparison(&dir, "ablation", &table)?);
    let json = dir.join("ablation.json");
    write_json(&json, &rows)?;
    outputs.push(json);
    write_manifest(&dir, "ablate", Some(&first), &[], &outputs)?;
    print!("{}", format_table(&table));
    Ok(())
}

fn cmd_synth(
    kind: SynthKind,
    length: usize,
    seed: u64,
    params: SynthParams,
    output: &Path,
) -> Result<(), CliError> {
    let series = synth_series(kind, length, seed, &params).map_err(CliError::input)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_csv(&series, output).map_err(|e| CliError::io(output, e))?;
    println!("wrote {} bars -> {}", series.len(), output.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Demos(common) => cmd_demos(&common),
        Command::Train {
            common,
            ablation,
            resume,
        } => cmd_train(&common, ablation, resume.as_deref()),
        Command::Backtest {
            common,
            checkpoint,
            baseline,
            split,
            name,
        } => cmd_backtest(
            &common,
            checkpoint.as_deref(),
            &baseline,
            split,
            name.as_deref(),
        ),
        Command::Compare { results, out } => cmd_compare(&results, out.as_deref()),
        Command::Ablate(common) => cmd_ablate(&common),
        Command::Synth {
            kind,
            length,
            seed,
            base,
            amplitude,
            period,
            drift,
            noise,
            output,
        } => cmd_synth(
            kind,
            length,
            seed,
            SynthParams {
                base,
                amplitude,
                period,
                drift,
                noise,
                ..Default::default()
            },
            &output,
        ),
    }
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code() as u8;
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
