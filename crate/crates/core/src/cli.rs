//! Experiment runner: config ingestion, single runs, parameter sweeps, and
//! CSV/NDJSON emission.
//!
//! Configuration comes from a JSON file, command-line flags, and the
//! `PRIVBCAST_SEED` environment variable. Flags override file values and the
//! environment variable overrides both, so a batch script can pin seeds
//! without touching configs. The fully resolved config is echoed to stderr
//! before any run so every output is reproducible from its log.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adversary::{self, Estimator};
use crate::diffusion::AlphaSchedule;
use crate::groups::MembershipIndex;
use crate::protocol::{self, Mode, RunParams};
use crate::simnet::{seeded, RngPurpose, SimError, Topology, DEFAULT_EVENT_BUDGET};
use crate::NodeId;

/// Column layout shared by `simulate` and `sweep`. Stable; downstream
/// tooling parses it by name.
pub const CSV_HEADER: &str = "run_id,seed,n,k,d_max,adversary_frac,mode,phase1_msgs,\
phase2_msgs,phase3_msgs,total_msgs,reach,ticks,true_origin,guess,correct,anonset,entropy_bits";

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Graph family to run on, written `regular(8)`, `er(0.01)`, `tree(3,6)`,
/// or `line`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopologySpec {
    Regular { degree: usize },
    ErdosRenyi { p: f64 },
    Tree { degree: usize, depth: usize },
    Line,
}

impl TopologySpec {
    /// Builds a concrete graph, drawing randomness for the random families.
    pub fn build(&self, n: usize, rng: &mut impl Rng) -> Result<Topology, SimError> {
        match *self {
            TopologySpec::Regular { degree } => Topology::regular(n, degree, rng),
            TopologySpec::ErdosRenyi { p } => Topology::erdos_renyi(n, p, rng),
            TopologySpec::Tree { degree, depth } => {
                let tree = Topology::tree(degree, depth)?;
                if tree.n() != n {
                    return Err(SimError::Topology(format!(
                        "tree({degree},{depth}) has {} nodes but n={n}",
                        tree.n()
                    )));
                }
                Ok(tree)
            }
            TopologySpec::Line => Topology::line(n),
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TopologySpec::Regular { degree } => write!(f, "regular({degree})"),
            TopologySpec::ErdosRenyi { p } => write!(f, "er({p})"),
            TopologySpec::Tree { degree, depth } => write!(f, "tree({degree},{depth})"),
            TopologySpec::Line => write!(f, "line"),
        }
    }
}

impl FromStr for TopologySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "line" {
            return Ok(TopologySpec::Line);
        }
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| format!("unrecognized topology {s:?}"))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| format!("missing ')' in topology {s:?}"))?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        match (name.trim(), parts.as_slice()) {
            ("regular", [d]) => {
                let degree = d.parse().map_err(|_| format!("bad degree {d:?}"))?;
                Ok(TopologySpec::Regular { degree })
            }
            ("er", [p]) | ("erdos_renyi", [p]) => {
                let p = p.parse().map_err(|_| format!("bad edge probability {p:?}"))?;
                Ok(TopologySpec::ErdosRenyi { p })
            }
            ("tree", [d, depth]) => {
                let degree = d.parse().map_err(|_| format!("bad degree {d:?}"))?;
                let depth = depth.parse().map_err(|_| format!("bad depth {depth:?}"))?;
                Ok(TopologySpec::Tree { degree, depth })
            }
            _ => Err(format!("unrecognized topology {s:?}")),
        }
    }
}

impl Serialize for TopologySpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TopologySpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Diffusion radius: a fixed wave count or `auto`, which resolves to half
/// the graph diameter rounded up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DMaxSpec {
    Auto,
    Fixed(usize),
}

impl DMaxSpec {
    pub fn resolve(&self, topology: &Topology) -> usize {
        match *self {
            DMaxSpec::Auto => topology.diameter().div_ceil(2),
            DMaxSpec::Fixed(d) => d,
        }
    }
}

impl fmt::Display for DMaxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DMaxSpec::Auto => write!(f, "auto"),
            DMaxSpec::Fixed(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for DMaxSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "auto" {
            return Ok(DMaxSpec::Auto);
        }
        s.trim()
            .parse()
            .map(DMaxSpec::Fixed)
            .map_err(|_| format!("d_max must be a count or \"auto\", got {s:?}"))
    }
}

impl Serialize for DMaxSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match *self {
            DMaxSpec::Auto => serializer.serialize_str("auto"),
            DMaxSpec::Fixed(d) => serializer.serialize_u64(d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for DMaxSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(s) => s.parse().map_err(D::Error::custom),
            serde_json::Value::Number(num) => num
                .as_u64()
                .map(|d| DMaxSpec::Fixed(d as usize))
                .ok_or_else(|| D::Error::custom("d_max must be a non-negative integer")),
            other => Err(D::Error::custom(format!(
                "d_max must be a count or \"auto\", got {other}"
            ))),
        }
    }
}

/// One experiment's full parameter set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub topology: TopologySpec,
    /// Minimum send-group size. Required for modes that run group rounds.
    pub k: Option<usize>,
    /// How many independent group partitions each node joins.
    pub overlap: usize,
    pub d_max: DMaxSpec,
    /// Ticks between group round starts.
    pub round_interval: u64,
    pub adversary_fraction: f64,
    pub estimator: Estimator,
    pub trials: u64,
    /// Master seed; run `i` uses `seed + i`.
    pub seed: u64,
    pub mode: Mode,
    /// CSV destination; stdout when unset.
    pub output: Option<PathBuf>,
    /// Write one NDJSON trace file per run next to the CSV.
    pub emit_trace: bool,
    /// Broadcast payload size in bytes.
    pub message_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 1000,
            topology: TopologySpec::Regular { degree: 8 },
            k: None,
            overlap: 1,
            d_max: DMaxSpec::Auto,
            round_interval: 8,
            adversary_fraction: 0.0,
            estimator: Estimator::FirstTimestamp,
            trials: 1,
            seed: 1,
            mode: Mode::Full,
            output: None,
            emit_trace: false,
            message_size: 256,
        }
    }
}

impl ExperimentConfig {
    /// Group size actually used: the configured `k`, or a minimal stand-in
    /// for modes whose group phase never runs.
    fn effective_k(&self) -> Result<usize, CliError> {
        match (self.k, self.mode) {
            (Some(k), _) => Ok(k),
            (None, Mode::Full | Mode::DcOnly) => Err(CliError::Config(format!(
                "k is required in {} mode",
                self.mode.as_str()
            ))),
            (None, Mode::FloodOnly | Mode::DiffusionOnly) => Ok(2),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |field: &str, why: String| Err(CliError::Config(format!("{field}: {why}")));
        if self.n < 2 {
            return fail("n", format!("need at least 2 nodes, got {}", self.n));
        }
        let k = self.effective_k()?;
        if k < 2 {
            return fail("k", format!("groups need at least 2 members, got {k}"));
        }
        if self.n < k {
            return fail("k", format!("k={k} exceeds n={}", self.n));
        }
        if self.overlap < 1 {
            return fail("overlap", "every node needs at least one group".into());
        }
        if self.round_interval < 4 {
            return fail(
                "round_interval",
                format!(
                    "a group round needs 3 ticks plus scheduling room, got {}",
                    self.round_interval
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.adversary_fraction) {
            return fail(
                "adversary_fraction",
                format!("must lie in [0, 1], got {}", self.adversary_fraction),
            );
        }
        if self.trials == 0 {
            return fail("trials", "need at least one run".into());
        }
        if self.emit_trace && self.output.is_none() {
            return fail("emit_trace", "trace files need an output path".into());
        }
        Ok(())
    }
}

/// Flag-level overrides, merged on top of file values.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// JSON config file to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Graph family: regular(D), er(P), tree(D,DEPTH), or line.
    #[arg(long)]
    pub topology: Option<TopologySpec>,
    /// Minimum send-group size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Independent group partitions per node.
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Diffusion radius, or "auto" for half the diameter.
    #[arg(long)]
    pub d_max: Option<DMaxSpec>,
    /// Ticks between group round starts.
    #[arg(long)]
    pub round_interval: Option<u64>,
    #[arg(long)]
    pub adversary_fraction: Option<f64>,
    /// Origin estimator: first_timestamp, uniform, or dc_group.
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<Estimator>,
    #[arg(long)]
    pub trials: Option<u64>,
    /// Master seed. PRIVBCAST_SEED overrides this.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Protocol mode: full, flood_only, diffusion_only, or dc_only.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// CSV destination; stdout when unset.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write one NDJSON trace file per run next to the CSV.
    #[arg(long)]
    pub emit_trace: bool,
    /// Broadcast payload size in bytes.
    #[arg(long)]
    pub message_size: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "full" => Ok(Mode::Full),
        "flood_only" => Ok(Mode::FloodOnly),
        "diffusion_only" => Ok(Mode::DiffusionOnly),
        "dc_only" => Ok(Mode::DcOnly),
        other => Err(format!("unknown mode {other:?}")),
    }
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    match s {
        "first_timestamp" => Ok(Estimator::FirstTimestamp),
        "uniform" => Ok(Estimator::Uniform),
        "dc_group" => Ok(Estimator::DcGroup),
        other => Err(format!("unknown estimator {other:?}")),
    }
}

/// Loads the config file (if any), applies flag overrides, then the
/// `PRIVBCAST_SEED` environment value, and validates the result.
pub fn resolve_config(
    overrides: &ConfigOverrides,
    env_seed: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let cfg = merged_config(overrides, env_seed)?;
    cfg.validate()?;
    Ok(cfg)
}

/// The merge without validation, for commands that only inspect the graph.
fn merged_config(
    overrides: &ConfigOverrides,
    env_seed: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("config: cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config: {e}")))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(n) = overrides.n {
        cfg.n = n;
    }
    if let Some(topology) = overrides.topology {
        cfg.topology = topology;
    }
    if let Some(k) = overrides.k {
        cfg.k = Some(k);
    }
    if let Some(overlap) = overrides.overlap {
        cfg.overlap = overlap;
    }
    if let Some(d_max) = overrides.d_max {
        cfg.d_max = d_max;
    }
    if let Some(round_interval) = overrides.round_interval {
        cfg.round_interval = round_interval;
    }
    if let Some(fraction) = overrides.adversary_fraction {
        cfg.adversary_fraction = fraction;
    }
    if let Some(estimator) = overrides.estimator {
        cfg.estimator = estimator;
    }
    if let Some(trials) = overrides.trials {
        cfg.trials = trials;
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = overrides.mode {
        cfg.mode = mode;
    }
    if let Some(output) = &overrides.output {
        cfg.output = Some(output.clone());
    }
    if overrides.emit_trace {
        cfg.emit_trace = true;
    }
    if let Some(message_size) = overrides.message_size {
        cfg.message_size = message_size;
    }
    if let Some(raw) = env_seed {
        cfg.seed = raw.trim().parse().map_err(|_| {
            CliError::Config(format!("seed: PRIVBCAST_SEED must be an integer, got {raw:?}"))
        })?;
    }
    Ok(cfg)
}

/// Failures split by exit code: bad configuration versus aborted runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => msg,
        }
    }
}

impl From<SimError> for CliError {
    fn from(err: SimError) -> CliError {
        match err {
            SimError::Topology(_) => CliError::Config(err.to_string()),
            SimError::EventBudget { .. } => CliError::Runtime(err.to_string()),
        }
    }
}

/// One finished run, ready to format as a CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub run_id: u64,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub d_max: usize,
    pub adversary_frac: f64,
    pub mode: Mode,
    pub phase_msgs: [u64; 3],
    pub total_msgs: u64,
    pub reach: f64,
    pub ticks: u64,
    pub true_origin: NodeId,
    pub guess: NodeId,
    pub correct: bool,
    pub anonset: usize,
    pub entropy_bits: f64,
}

impl RunRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.n,
            self.k,
            self.d_max,
            self.adversary_frac,
            self.mode.as_str(),
            self.phase_msgs[0],
            self.phase_msgs[1],
            self.phase_msgs[2],
            self.total_msgs,
            self.reach,
            self.ticks,
            self.true_origin.0,
            self.guess.0,
            u8::from(self.correct),
            self.anonset,
            self.entropy_bits,
        )
    }
}

/// Mean and population standard deviation of every numeric column.
/// Identity columns (seed, mode, origin, guess) stay empty.
fn aggregate_lines(rows: &[RunRow]) -> [String; 2] {
    let cols: Vec<fn(&RunRow) -> f64> = vec![
        |r| r.n as f64,
        |r| r.k as f64,
        |r| r.d_max as f64,
        |r| r.adversary_frac,
        |r| r.phase_msgs[0] as f64,
        |r| r.phase_msgs[1] as f64,
        |r| r.phase_msgs[2] as f64,
        |r| r.total_msgs as f64,
        |r| r.reach,
        |r| r.ticks as f64,
        |r| f64::from(r.correct),
        |r| r.anonset as f64,
        |r| r.entropy_bits,
    ];
    let count = rows.len() as f64;
    let means: Vec<f64> = cols
        .iter()
        .map(|col| rows.iter().map(|r| col(r)).sum::<f64>() / count)
        .collect();
    let stddevs: Vec<f64> = cols
        .iter()
        .zip(&means)
        .map(|(col, mean)| {
            let var = rows.iter().map(|r| (col(r) - mean).powi(2)).sum::<f64>() / count;
            var.sqrt()
        })
        .collect();
    let render = |label: &str, vals: &[f64]| {
        format!(
            "{label},,{},{},{},{},,{},{},{},{},{},{},,,{},{},{}",
            vals[0],
            vals[1],
            vals[2],
            vals[3],
            vals[4],
            vals[5],
            vals[6],
            vals[7],
            vals[8],
            vals[9],
            vals[10],
            vals[11],
            vals[12],
        )
    };
    [render("mean", &means), render("stddev", &stddevs)]
}

/// One completed trial with everything a caller might render: the summary
/// row, the trace metadata line, and the wire trace itself.
pub struct Trial {
    pub row: RunRow,
    pub meta: serde_json::Value,
    pub trace: crate::simnet::Trace,
}

/// Runs one trial end to end: build the world, broadcast, estimate.
/// `collect_trace` keeps the per-delivery records; callers that only need
/// the row can skip them.
pub fn run_trial(
    cfg: &ExperimentConfig,
    run_id: u64,
    collect_trace: bool,
) -> Result<Trial, CliError> {
    let seed = cfg.seed + run_id;
    let k = cfg.effective_k()?;
    let topology = cfg
        .topology
        .build(cfg.n, &mut seeded(seed, RngPurpose::Topology))?;
    let d_max = cfg.d_max.resolve(&topology);
    let mut population_rng = seeded(seed, RngPurpose::Churn);
    let membership =
        MembershipIndex::bootstrap(cfg.n as u32, k, cfg.overlap, &mut population_rng);
    let origin = NodeId(population_rng.gen_range(0..cfg.n as u32));
    let adversaries = adversary::select_adversaries(
        cfg.n,
        cfg.adversary_fraction,
        &mut seeded(seed, RngPurpose::Adversary),
    );
    let collect = collect_trace || cfg.estimator == Estimator::FirstTimestamp;
    let mut message = vec![0u8; cfg.message_size];
    seeded(seed, RngPurpose::Shares).fill(message.as_mut_slice());
    let params = RunParams {
        topology: &topology,
        membership: &membership,
        mode: cfg.mode,
        d_max,
        round_interval: cfg.round_interval,
        schedule: AlphaSchedule::Harmonic,
        message,
        origin,
        master_seed: seed,
        event_budget: DEFAULT_EVENT_BUDGET,
        collect_trace: collect,
        preload: Vec::new(),
    };
    let report = protocol::run(&params)?;
    let group = report.group.and_then(|gid| membership.group(gid));
    let estimate = adversary::estimate(
        cfg.estimator,
        report.trace.records(),
        &adversaries,
        cfg.n,
        group,
        origin,
    );
    let meta = trace_meta(cfg, seed, run_id, d_max, origin, &membership);
    let row = RunRow {
        run_id,
        seed,
        n: cfg.n,
        k,
        d_max,
        adversary_frac: cfg.adversary_fraction,
        mode: cfg.mode,
        phase_msgs: report.phase_messages,
        total_msgs: report.total_messages(),
        reach: report.reach,
        ticks: report.ticks,
        true_origin: origin,
        guess: estimate.guess,
        correct: estimate.guess == origin,
        anonset: estimate.anonymity_set_size,
        entropy_bits: estimate.entropy_bits,
    };
    Ok(Trial {
        row,
        meta,
        trace: report.trace,
    })
}

fn execute_run(cfg: &ExperimentConfig, run_id: u64) -> Result<RunRow, CliError> {
    let trial = run_trial(cfg, run_id, cfg.emit_trace)?;
    if cfg.emit_trace {
        let out_path = trace_path(cfg.output.as_deref().expect("validated"), run_id);
        let file = File::create(&out_path).map_err(|e| {
            CliError::Config(format!("output: cannot write {}: {e}", out_path.display()))
        })?;
        let mut writer = BufWriter::new(file);
        trial
            .trace
            .write_ndjson(&trial.meta, &mut writer)
            .and_then(|()| writer.flush())
            .map_err(|e| {
                CliError::Config(format!("output: cannot write {}: {e}", out_path.display()))
            })?;
    }
    Ok(trial.row)
}

fn trace_path(output: &Path, run_id: u64) -> PathBuf {
    output.with_extension(format!("run{run_id}.trace.ndjson"))
}

fn trace_meta(
    cfg: &ExperimentConfig,
    seed: u64,
    run_id: u64,
    d_max: usize,
    origin: NodeId,
    membership: &MembershipIndex,
) -> serde_json::Value {
    let groups: BTreeMap<String, Vec<u32>> = membership
        .groups()
        .iter()
        .map(|(gid, members)| {
            (
                gid.0.to_string(),
                members.iter().map(|node| node.0).collect(),
            )
        })
        .collect();
    serde_json::json!({
        "config": cfg,
        "d_max": d_max,
        "groups": groups,
        "origin": origin.0,
        "run_id": run_id,
        "seed": seed,
    })
}

fn echo_config(cfg: &ExperimentConfig, resolved_d_max: usize) {
    let mut echoed = serde_json::to_value(cfg).expect("config serializes");
    echoed["d_max"] = serde_json::json!(resolved_d_max);
    eprintln!("config: {echoed}");
}

/// Resolves `d_max` against the run-0 graph so the echoed config carries a
/// number even when set to `auto`.
fn resolve_d_max_for_echo(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    let topology = cfg
        .topology
        .build(cfg.n, &mut seeded(cfg.seed, RngPurpose::Topology))?;
    Ok(cfg.d_max.resolve(&topology))
}

fn open_output(cfg: &ExperimentConfig) -> Result<Box<dyn Write>, CliError> {
    match &cfg.output {
        Some(path) => {
            let file = File::create(path).map_err(|e| {
                CliError::Config(format!("output: cannot write {}: {e}", path.display()))
            })?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn write_lines(out: &mut dyn Write, lines: &[String]) -> Result<(), CliError> {
    let mut emit = || -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for line in lines {
            writeln!(out, "{line}")?;
        }
        out.flush()
    };
    emit().map_err(|e| CliError::Config(format!("output: {e}")))
}

/// Runs `trials` independent simulations and writes per-run rows plus
/// mean/stddev aggregate rows.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    echo_config(cfg, resolve_d_max_for_echo(cfg)?);
    let rows: Vec<RunRow> = (0..cfg.trials)
        .into_par_iter()
        .map(|run_id| execute_run(cfg, run_id))
        .collect::<Result<_, _>>()?;
    let mut lines: Vec<String> = rows.iter().map(RunRow::csv_line).collect();
    lines.extend(aggregate_lines(&rows));
    write_lines(&mut *open_output(cfg)?, &lines)
}

/// Fields `sweep` can vary.
const SWEEPABLE: [&str; 4] = ["k", "d_max", "adversary_fraction", "n"];

fn apply_axis(cfg: &ExperimentConfig, axis: &str, value: f64) -> Result<ExperimentConfig, CliError> {
    let mut cfg = cfg.clone();
    let as_count = |value: f64, field: &str| -> Result<usize, CliError> {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(CliError::Config(format!(
                "{field}: sweep value {value} is not a non-negative integer"
            )));
        }
        Ok(value as usize)
    };
    match axis {
        "k" => cfg.k = Some(as_count(value, "k")?),
        "d_max" => cfg.d_max = DMaxSpec::Fixed(as_count(value, "d_max")?),
        "adversary_fraction" => cfg.adversary_fraction = value,
        "n" => cfg.n = as_count(value, "n")?,
        other => {
            return Err(CliError::Config(format!(
                "axis: {other:?} is not sweepable (choose from {})",
                SWEEPABLE.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the config once per (axis value, trial) pair. Trials reuse the same
/// per-run seeds across values, so rows are paired for comparisons.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: &str, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("values: sweep needs at least one value".into()));
    }
    let cells: Vec<ExperimentConfig> = values
        .iter()
        .map(|&value| apply_axis(cfg, axis, value))
        .collect::<Result<_, _>>()?;
    echo_config(cfg, resolve_d_max_for_echo(&cells[0])?);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|cell| (0..cfg.trials).map(move |run_id| (cell, run_id)))
        .collect();
    let rows: Vec<RunRow> = jobs
        .into_par_iter()
        .map(|(cell, run_id)| execute_run(&cells[cell], run_id))
        .collect::<Result<_, _>>()?;
    let lines: Vec<String> = rows.iter().map(RunRow::csv_line).collect();
    write_lines(&mut *open_output(cfg)?, &lines)
}

/// Prints the built graph's size, edge count, and diameter.
pub fn cmd_topology_info(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let topology = cfg
        .topology
        .build(cfg.n, &mut seeded(cfg.seed, RngPurpose::Topology))?;
    let mut emit = || -> io::Result<()> {
        writeln!(out, "n: {}", topology.n())?;
        writeln!(out, "edges: {}", topology.edge_count())?;
        writeln!(out, "diameter: {}", topology.diameter())
    };
    emit().map_err(|e| CliError::Config(format!("output: {e}")))
}

#[derive(Debug, Parser)]
#[command(
    name = "privbcast",
    about = "Discrete-event simulator for group-anonymous broadcast",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run independent trials of one configuration and emit CSV rows.
    Simulate(SimulateArgs),
    /// Vary one field across a value list, trials per value, paired seeds.
    Sweep(SweepArgs),
    /// Print size, edge count, and diameter of the configured graph.
    TopologyInfo(TopologyInfoArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Field to vary: k, d_max, adversary_fraction, or n.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Debug, Args)]
struct TopologyInfoArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Parses arguments, dispatches, and converts failures into exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var("PRIVBCAST_SEED").ok();
    let outcome = match &cli.command {
        Command::Simulate(args) => {
            resolve_config(&args.overrides, env_seed.as_deref()).and_then(|cfg| cmd_simulate(&cfg))
        }
        Command::Sweep(args) => merged_config(&args.overrides, env_seed.as_deref())
            .and_then(|cfg| cmd_sweep(&cfg, &args.axis, &args.values)),
        Command::TopologyInfo(args) => merged_config(&args.overrides, env_seed.as_deref())
            .and_then(|cfg| cmd_topology_info(&cfg, &mut io::stdout().lock())),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_specs_parse_and_round_trip() {
        let cases = [
            ("regular(8)", TopologySpec::Regular { degree: 8 }),
            ("er(0.01)", TopologySpec::ErdosRenyi { p: 0.01 }),
            ("tree(3, 6)", TopologySpec::Tree { degree: 3, depth: 6 }),
            ("line", TopologySpec::Line),
        ];
        for (text, want) in cases {
            let parsed: TopologySpec = text.parse().expect(text);
            assert_eq!(parsed, want);
            let reparsed: TopologySpec = parsed.to_string().parse().expect("round trip");
            assert_eq!(reparsed, want);
        }
        assert!("pentagon".parse::<TopologySpec>().is_err());
        assert!("regular(8".parse::<TopologySpec>().is_err());
        assert!("tree(3)".parse::<TopologySpec>().is_err());
    }

    #[test]
    fn d_max_accepts_numbers_and_auto_in_json() {
        let auto: DMaxSpec = serde_json::from_str("\"auto\"").expect("auto");
        assert_eq!(auto, DMaxSpec::Auto);
        let fixed: DMaxSpec = serde_json::from_str("4").expect("fixed");
        assert_eq!(fixed, DMaxSpec::Fixed(4));
        assert!(serde_json::from_str::<DMaxSpec>("-3").is_err());
        assert!(serde_json::from_str::<DMaxSpec>("\"several\"").is_err());
        assert_eq!(serde_json::to_string(&DMaxSpec::Auto).expect("json"), "\"auto\"");
        assert_eq!(serde_json::to_string(&DMaxSpec::Fixed(4)).expect("json"), "4");
    }

    #[test]
    fn config_resolution_layers_file_flags_and_env() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("experiment.json");
        std::fs::write(
            &path,
            r#"{"n": 40, "k": 4, "trials": 100, "seed": 7, "mode": "flood_only",
               "topology": "regular(4)", "d_max": "auto"}"#,
        )
        .expect("write config");
        let overrides = ConfigOverrides {
            config: Some(path),
            trials: Some(5),
            seed: Some(11),
            ..ConfigOverrides::default()
        };
        let cfg = resolve_config(&overrides, None).expect("resolve");
        assert_eq!(cfg.n, 40);
        assert_eq!(cfg.trials, 5);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.mode, Mode::FloodOnly);

        let cfg = resolve_config(&overrides, Some("99")).expect("resolve");
        assert_eq!(cfg.seed, 99);
        assert!(resolve_config(&overrides, Some("soon")).is_err());
    }

    #[test]
    fn validation_names_the_offending_field() {
        let missing_k = ExperimentConfig {
            k: None,
            ..ExperimentConfig::default()
        };
        let err = missing_k.validate().expect_err("k required in full mode");
        assert!(err.message().contains('k'));
        assert_eq!(err.exit_code(), 2);

        let mut cfg = ExperimentConfig {
            k: Some(8),
            ..ExperimentConfig::default()
        };
        cfg.validate().expect("baseline valid");
        cfg.adversary_fraction = 1.5;
        let err = cfg.validate().expect_err("fraction out of range");
        assert!(err.message().starts_with("adversary_fraction"));

        let flood = ExperimentConfig {
            k: None,
            mode: Mode::FloodOnly,
            ..ExperimentConfig::default()
        };
        flood.validate().expect("k optional without group rounds");
    }

    #[test]
    fn sim_errors_map_to_exit_codes() {
        let infeasible = CliError::from(SimError::Topology("no such graph".into()));
        assert_eq!(infeasible.exit_code(), 2);
        let aborted = CliError::from(SimError::EventBudget { budget: 1, tick: 0 });
        assert_eq!(aborted.exit_code(), 3);
    }

    #[test]
    fn csv_layout_matches_the_header() {
        assert_eq!(CSV_HEADER.split(',').count(), 18);
        let row = RunRow {
            run_id: 3,
            seed: 45,
            n: 100,
            k: 8,
            d_max: 4,
            adversary_frac: 0.2,
            mode: Mode::Full,
            phase_msgs: [216, 40, 190],
            total_msgs: 446,
            reach: 1.0,
            ticks: 37,
            true_origin: NodeId(17),
            guess: NodeId(9),
            correct: false,
            anonset: 12,
            entropy_bits: 3.5,
        };
        let line = row.csv_line();
        assert_eq!(line.split(',').count(), 18);
        assert_eq!(
            line,
            "3,45,100,8,4,0.2,full,216,40,190,446,1,37,17,9,0,12,3.5"
        );
    }

    #[test]
    fn aggregates_average_numeric_columns_and_blank_identities() {
        let base = RunRow {
            run_id: 0,
            seed: 1,
            n: 10,
            k: 4,
            d_max: 2,
            adversary_frac: 0.1,
            mode: Mode::FloodOnly,
            phase_msgs: [0, 0, 10],
            total_msgs: 10,
            reach: 1.0,
            ticks: 5,
            true_origin: NodeId(0),
            guess: NodeId(0),
            correct: true,
            anonset: 1,
            entropy_bits: 0.0,
        };
        let mut other = base.clone();
        other.total_msgs = 14;
        other.phase_msgs = [0, 0, 14];
        other.correct = false;
        let [mean, stddev] = aggregate_lines(&[base, other]);
        assert_eq!(mean.split(',').count(), 18);
        assert_eq!(stddev.split(',').count(), 18);
        assert_eq!(
            mean,
            "mean,,10,4,2,0.1,,0,0,12,12,1,5,,,0.5,1,0"
        );
        assert_eq!(
            stddev,
            "stddev,,0,0,0,0,,0,0,2,2,0,0,,,0.5,0,0"
        );
    }

    #[test]
    fn runs_are_reproducible_and_seeded_by_index() {
        let cfg = ExperimentConfig {
            n: 40,
            topology: TopologySpec::Regular { degree: 4 },
            k: Some(5),
            seed: 70,
            mode: Mode::Full,
            adversary_fraction: 0.1,
            ..ExperimentConfig::default()
        };
        let a = execute_run(&cfg, 2).expect("run");
        let b = execute_run(&cfg, 2).expect("run");
        assert_eq!(a.csv_line(), b.csv_line());
        assert_eq!(a.seed, 72);
        assert_eq!(a.reach, 1.0);
        let shifted = execute_run(&cfg, 3).expect("run");
        assert_eq!(shifted.seed, 73);
    }

    #[test]
    fn flood_runs_match_the_edge_formula() {
        let cfg = ExperimentConfig {
            n: 60,
            topology: TopologySpec::Regular { degree: 6 },
            k: Some(4),
            mode: Mode::FloodOnly,
            seed: 5,
            ..ExperimentConfig::default()
        };
        let row = execute_run(&cfg, 0).expect("run");
        assert_eq!(row.total_msgs, (2 * (60 * 6 / 2) - 60 + 1) as u64);
        assert_eq!(row.phase_msgs[0], 0);
        assert_eq!(row.phase_msgs[1], 0);
        assert_eq!(row.reach, 1.0);
    }

    #[test]
    fn sweep_rejects_bad_axes_and_bad_values() {
        let cfg = ExperimentConfig {
            k: Some(4),
            ..ExperimentConfig::default()
        };
        let err = cmd_sweep(&cfg, "mode", &[1.0]).expect_err("mode is not sweepable");
        assert!(err.message().contains("axis"));
        let err = cmd_sweep(&cfg, "k", &[]).expect_err("empty values");
        assert!(err.message().contains("values"));
        let err = apply_axis(&cfg, "k", 4.5).expect_err("fractional k");
        assert_eq!(err.exit_code(), 2);
        let swept = apply_axis(&cfg, "adversary_fraction", 0.35).expect("fraction axis");
        assert_eq!(swept.adversary_fraction, 0.35);
    }

    #[test]
    fn trace_files_land_next_to_the_csv() {
        let dir = tempfile::tempdir().expect("tempdir");
        let csv = dir.path().join("out.csv");
        let cfg = ExperimentConfig {
            n: 30,
            topology: TopologySpec::Regular { degree: 4 },
            k: Some(5),
            mode: Mode::Full,
            emit_trace: true,
            output: Some(csv.clone()),
            seed: 9,
            ..ExperimentConfig::default()
        };
        let row = execute_run(&cfg, 0).expect("run");
        let trace = dir.path().join("out.run0.trace.ndjson");
        let text = std::fs::read_to_string(&trace).expect("trace written");
        let mut lines = text.lines();
        let meta: serde_json::Value =
            serde_json::from_str(lines.next().expect("meta line")).expect("meta json");
        assert_eq!(meta["seed"], serde_json::json!(9));
        assert_eq!(meta["origin"], serde_json::json!(row.true_origin.0));
        assert!(meta["groups"].as_object().expect("groups").len() >= 5);
        assert_eq!(lines.count() as u64, row.total_msgs);
    }
}
