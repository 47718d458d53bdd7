//! Run orchestration: configuration files, run directories, exports and the
//! subcommands of the `sipo` binary.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::environments::{ActionSpace, NavConfig};
use crate::intrinsic::{Archive, ArchiveEntry, IntrinsicConfig, IntrinsicError, IntrinsicKind};
use crate::measures::gridworld::{comparison_table, Cell};
use crate::measures::{emd, euclidean, knn_entropy, state_l2, MeasureError, StateCloud};
use crate::oracle::{verify_theorem1, worst_case, GeneratorConfig, OracleError, Theorem1Report, WorstCase};
use crate::trainer::{
    calibrate, count_distinct_landmarks, evaluate, itr_run, pbt_run, stream_rng, CalibrationReport, EnvKind,
    EnvSettings, MetricsRow, RunOutcome, RunStats, Stream, TrainError, TrainerConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ARCHIVE_DIR: &str = "archive";
pub const POLICY_DIR: &str = "policies";
pub const DEFAULT_K: usize = 12;

/// Keys that may be absent from the resolved defaults.
const OPTIONAL_KEYS: [&str; 1] = ["trainer.freeze_lambda"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: expected {expected}, found {found}")]
    Type { key: String, expected: String, found: String },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Intrinsic(#[from] IntrinsicError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Format(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SipoRbf,
    SipoWd,
    Pbt,
    Ppo,
    /// Iterative training with the environment's default intrinsic reward.
    Itr,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Algorithm as ValueEnum>::from_str(s, false).map_err(|_| format!("unknown algorithm {s:?}"))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid_size: usize,
    pub trainer: TrainerConfig,
    pub intrinsic: IntrinsicConfig,
    pub nav: NavConfig,
}

impl RunConfig {
    pub fn defaults(algorithm: Algorithm, env: EnvKind) -> Self {
        let trainer = TrainerConfig::for_env(env);
        let kind = match (algorithm, env) {
            (Algorithm::SipoWd, _) => IntrinsicKind::Wd,
            (Algorithm::SipoRbf, _) | (_, EnvKind::Gridworld) => IntrinsicKind::Rbf,
            (_, EnvKind::Nav) => IntrinsicKind::FinalState,
        };
        let nav = NavConfig::default();
        let mut intrinsic = IntrinsicConfig { kind, ..IntrinsicConfig::default() };
        if kind == IntrinsicKind::FinalState {
            // Scaled to the closest landmark pair rather than to δ: after
            // normalization a large δ would otherwise shrink the push to nothing.
            intrinsic.alpha = 1.0 / (trainer.lambda_max * nav.separation * nav.separation);
        }
        RunConfig {
            algorithm,
            env,
            seed: 0,
            out_dir: PathBuf::from("runs/latest"),
            grid_size: 5,
            trainer,
            intrinsic,
            nav,
        }
    }

    pub fn env_settings(&self) -> EnvSettings {
        match self.env {
            EnvKind::Gridworld => EnvSettings::gridworld(self.grid_size),
            EnvKind::Nav => EnvSettings::nav(self.nav),
        }
    }

    /// Intrinsic settings used by the algorithm; `None` for plain PPO.
    pub fn intrinsic_for_run(&self) -> Option<&IntrinsicConfig> {
        (self.algorithm != Algorithm::Ppo).then_some(&self.intrinsic)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trainer.validate().map_err(|e| prefixed("trainer", e.to_string()))?;
        self.intrinsic.validate().map_err(|e| prefixed("intrinsic", e.to_string()))?;
        let required = match self.algorithm {
            Algorithm::SipoRbf => Some(IntrinsicKind::Rbf),
            Algorithm::SipoWd => Some(IntrinsicKind::Wd),
            _ => None,
        };
        if let Some(kind) = required.filter(|k| *k != self.intrinsic.kind) {
            return Err(ConfigError::Invalid {
                key: "intrinsic.kind".into(),
                message: format!("algorithm {} requires {kind:?}", self.algorithm),
            });
        }
        if self.grid_size < 2 {
            return Err(ConfigError::Invalid { key: "grid_size".into(), message: "must be at least 2".into() });
        }
        if self.env == EnvKind::Nav {
            self.env_settings()
                .build(0)
                .map_err(|e| ConfigError::Invalid { key: "nav".into(), message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Format(e.to_string()))
    }
}

/// Turns `"lambda_max must be positive"` into an error on `trainer.lambda_max`.
fn prefixed(section: &str, message: String) -> ConfigError {
    let body = message.split_once(": ").map_or(message.as_str(), |(_, rest)| rest);
    let field = body.split_whitespace().next().unwrap_or("");
    ConfigError::Invalid { key: format!("{section}.{field}"), message: body.to_string() }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub env: Option<EnvKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub freeze_lambda: Option<f64>,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn type_error(key: &str, expected: &Value, found: &Value) -> ConfigError {
    ConfigError::Type { key: key.to_string(), expected: type_name(expected).into(), found: type_name(found).into() }
}

fn coerce(key: &str, slot: &Value, v: &Value) -> Result<Value, ConfigError> {
    match (slot, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(*i as f64)),
        (Value::Integer(_), Value::Integer(i)) if *i < 0 => {
            Err(ConfigError::Invalid { key: key.to_string(), message: format!("must be non-negative, got {i}") })
        }
        (Value::String(_), Value::String(s)) if key == "intrinsic.kind" => {
            s.parse::<IntrinsicKind>().map_err(|m| ConfigError::Invalid { key: key.to_string(), message: m })?;
            Ok(v.clone())
        }
        _ if std::mem::discriminant(slot) == std::mem::discriminant(v) => Ok(v.clone()),
        _ => Err(type_error(key, slot, v)),
    }
}

fn merge(base: &mut Table, user: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &key)?,
            (Some(slot), v) => *slot = coerce(&key, slot, v)?,
            (None, Value::Float(_) | Value::Integer(_)) if OPTIONAL_KEYS.contains(&key.as_str()) => {
                base.insert(k.clone(), coerce(&key, &Value::Float(0.0), v)?);
            }
            (None, _) => return Err(ConfigError::UnknownKey(key)),
        }
    }
    Ok(())
}

fn parse_tag<T: std::str::FromStr<Err = String>>(table: &Table, key: &str) -> Result<Option<T>, ConfigError> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => {
            s.parse().map(Some).map_err(|m| ConfigError::Invalid { key: key.to_string(), message: m })
        }
        Some(other) => Err(type_error(key, &Value::String(String::new()), other)),
    }
}

/// Resolves a configuration from TOML text: defaults for the chosen
/// algorithm and environment, then the file, then `overrides`.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let user: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let env = match overrides.env {
        Some(e) => e,
        None => parse_tag(&user, "env")?.unwrap_or(EnvKind::Gridworld),
    };
    let algorithm = match overrides.algorithm {
        Some(a) => a,
        None => parse_tag(&user, "algorithm")?.unwrap_or(Algorithm::Itr),
    };
    let defaults = RunConfig::defaults(algorithm, env);
    let mut merged = Table::try_from(&defaults).map_err(|e| ConfigError::Parse(e.to_string()))?;
    merge(&mut merged, &user, "")?;
    let mut cfg: RunConfig = Value::Table(merged).try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.algorithm = algorithm;
    cfg.env = env;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out_dir {
        cfg.out_dir.clone_from(o);
    }
    if let Some(l) = overrides.freeze_lambda {
        cfg.trainer.freeze_lambda = Some(l);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and resolves a configuration file; `None` means all defaults.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))
}

/// Writes the resolved configuration to `<out_dir>/config.toml`.
pub fn echo_config(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let path = cfg.out_dir.join(CONFIG_FILE);
    write_atomic(&path, cfg.to_toml()?.as_bytes())?;
    Ok(path)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iteration,step,J_hat,R_int_0..,lambda_0..`; absent constraints are empty.
pub fn metrics_csv(rows: &[MetricsRow], width: usize) -> String {
    let mut out = String::from("iteration,step,J_hat");
    for j in 0..width {
        write!(out, ",R_int_{j}").unwrap();
    }
    for j in 0..width {
        write!(out, ",lambda_{j}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{}", r.iteration, r.step, r.j_hat).unwrap();
        for j in 0..width {
            write!(out, ",{}", cell(r.r_int.get(j).copied().flatten())).unwrap();
        }
        for j in 0..width {
            write!(out, ",{}", cell(r.lambda.get(j).copied().flatten())).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,step,wall_time\n");
    for r in rows {
        writeln!(out, "{},{},{:.3}", r.iteration, r.step, r.wall_time).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub action_space: ActionSpace,
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub seed: u64,
    pub eval_returns: Vec<f64>,
    /// Outcome each policy reaches in at least half of its episodes.
    pub dominant_outcomes: Vec<Option<usize>>,
    pub distinct_landmarks: Option<usize>,
    pub stats: RunStats,
}

pub fn train(cfg: &RunConfig, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let env = cfg.env_settings();
    let out = match cfg.algorithm {
        Algorithm::Pbt => pbt_run(&cfg.trainer, &cfg.intrinsic, &env, cfg.seed, on_row)?,
        _ => itr_run(&cfg.trainer, cfg.intrinsic_for_run(), &env, cfg.seed, on_row)?,
    };
    Ok(out)
}

pub fn summarize(cfg: &RunConfig, out: &RunOutcome) -> TrainSummary {
    TrainSummary {
        algorithm: cfg.algorithm,
        env: cfg.env,
        seed: cfg.seed,
        eval_returns: out.evals.iter().map(|e| e.mean_return()).collect(),
        dominant_outcomes: out.evals.iter().map(|e| e.dominant_outcome()).collect(),
        distinct_landmarks: (cfg.env == EnvKind::Nav).then(|| count_distinct_landmarks(&out.evals)),
        stats: out.stats.clone(),
    }
}

/// Writes config echo, metrics, timing, checkpoints, archive and summary.
pub fn write_run(cfg: &RunConfig, out: &RunOutcome) -> Result<TrainSummary, CliError> {
    let dir = &cfg.out_dir;
    echo_config(cfg)?;
    write_atomic(&dir.join(METRICS_FILE), metrics_csv(&out.rows, cfg.trainer.population).as_bytes())?;
    write_atomic(&dir.join(TIMING_FILE), timing_csv(&out.rows).as_bytes())?;
    for (i, p) in out.policies.iter().enumerate() {
        write_atomic(&dir.join(POLICY_DIR).join(format!("policy_{i}.bin")), &p.actor.to_bytes())?;
        let meta = PolicyMeta { action_space: p.action_space, log_std: p.log_std.clone() };
        write_atomic(&dir.join(POLICY_DIR).join(format!("policy_{i}.json")), to_json(&meta)?.as_bytes())?;
    }
    out.archive.save(&dir.join(ARCHIVE_DIR))?;
    let summary = summarize(cfg, out);
    write_atomic(&dir.join(SUMMARY_FILE), to_json(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Axis-aligned binning of 2-D positions. Axis 0 indexes CSV rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub resolution: usize,
}

impl HeatmapGrid {
    /// One cell per grid-world square, for normalized coordinates.
    pub fn gridworld(size: usize) -> Self {
        let h = 0.5 / (size - 1) as f64;
        HeatmapGrid { lo: [-h, -h], hi: [1.0 + h, 1.0 + h], resolution: size }
    }

    pub fn arena(half_width: f64, resolution: usize) -> Self {
        HeatmapGrid { lo: [-half_width; 2], hi: [half_width; 2], resolution }
    }

    fn bin(&self, x: f64, axis: usize) -> usize {
        let t = (x - self.lo[axis]) / (self.hi[axis] - self.lo[axis]);
        ((t * self.resolution as f64).floor().max(0.0) as usize).min(self.resolution - 1)
    }
}

/// Visit counts per cell; positions outside the bounds go to the edge cells.
pub fn export_heatmap(trajectories: &[Vec<[f64; 2]>], grid: &HeatmapGrid) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; grid.resolution]; grid.resolution];
    for p in trajectories.iter().flatten() {
        counts[grid.bin(p[0], 0)][grid.bin(p[1], 1)] += 1;
    }
    counts
}

pub fn heatmap_csv(counts: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in counts {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Position slice (first two coordinates of the newest frame) of every
/// archived record, grouped by episode in timestep order.
pub fn entry_trajectories(entry: &ArchiveEntry, raw_dim: usize, scale: f64) -> Vec<Vec<[f64; 2]>> {
    let mut records: Vec<_> = entry.records().iter().collect();
    records.sort_by_key(|r| (r.episode, r.timestep));
    let mut out: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut current = None;
    for r in records {
        let frame = &r.stacked_state[r.stacked_state.len() - raw_dim..];
        let p = [frame[0] * scale, frame[1] * scale];
        if current != Some(r.episode) {
            out.push(Vec::new());
            current = Some(r.episode);
        }
        out.last_mut().expect("pushed above").push(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub emd: bool,
    pub state_l2: bool,
    pub entropy: bool,
    /// Points per policy kept for the transport problem.
    pub emd_points: usize,
    pub entropy_points: usize,
    /// Multiplies positions, e.g. back to grid units.
    pub scale: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: DEFAULT_K,
            emd: true,
            state_l2: true,
            entropy: true,
            emd_points: 256,
            entropy_points: 4096,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiversity {
    pub i: usize,
    pub j: usize,
    pub state_emd: Option<f64>,
    pub state_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub policies: usize,
    pub k: usize,
    pub entropy: Option<f64>,
    pub pairwise: Vec<PairDiversity>,
}

fn pad_to(mut t: Vec<Vec<f64>>, len: usize) -> Vec<Vec<f64>> {
    if let Some(last) = t.last().cloned() {
        t.resize(len, last);
    }
    t
}

/// Pairwise state measures between archive entries and the k-NN entropy of
/// their merged position cloud.
///
/// The EMD is taken between the empirical position distributions and scaled
/// by the mean episode length, so a single deterministic episode per policy
/// gives the optimal matching cost with unit mass per state. State-L2 compares
/// the first episode of each policy, the shorter one held at its final state.
pub fn eval_population(archive: &Archive, opts: &EvalOptions) -> Result<DiversityReport, CliError> {
    let raw_dim = archive.raw_dim();
    if raw_dim < 2 {
        return Err(CliError::Data(format!("need a 2-D position slice, state width is {raw_dim}")));
    }
    let trajs: Vec<Vec<Vec<[f64; 2]>>> =
        archive.entries().iter().map(|e| entry_trajectories(e, raw_dim, opts.scale)).collect();
    if trajs.iter().any(Vec::is_empty) {
        return Err(CliError::Data("archive entry without records".into()));
    }
    let to_vecs = |ps: &[[f64; 2]]| ps.iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clouds: Vec<StateCloud> = trajs
        .iter()
        .map(|t| Ok(StateCloud::new(to_vecs(&t.concat()))?.subsample(opts.emd_points, &mut rng)))
        .collect::<Result<_, MeasureError>>()?;
    let mean_len: Vec<f64> =
        trajs.iter().map(|t| t.iter().map(Vec::len).sum::<usize>() as f64 / t.len() as f64).collect();
    let mut pairwise = Vec::new();
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            let state_emd = if opts.emd {
                let cost = emd(&clouds[i], &clouds[j], euclidean)?.cost;
                Some(cost * 0.5 * (mean_len[i] + mean_len[j]))
            } else {
                None
            };
            let l2 = if opts.state_l2 {
                let (a, b) = (to_vecs(&trajs[i][0]), to_vecs(&trajs[j][0]));
                let len = a.len().max(b.len());
                Some(state_l2(&pad_to(a, len), &pad_to(b, len))?)
            } else {
                None
            };
            pairwise.push(PairDiversity { i, j, state_emd, state_l2: l2 });
        }
    }
    let entropy = if opts.entropy {
        let merged: Vec<Vec<f64>> = trajs.iter().flat_map(|t| to_vecs(&t.concat())).collect();
        let cloud = StateCloud::new(merged)?.subsample(opts.entropy_points, &mut rng);
        Some(knn_entropy(&cloud, opts.k)?)
    } else {
        None
    };
    Ok(DiversityReport { policies: trajs.len(), k: opts.k, entropy, pairwise })
}

fn position_scale(cfg: &RunConfig) -> f64 {
    match cfg.env {
        EnvKind::Gridworld => (cfg.grid_size - 1) as f64,
        EnvKind::Nav => 1.0,
    }
}

pub fn load_run_archive(run_dir: &Path) -> Result<(RunConfig, Archive), CliError> {
    let cfg = load_config(Some(&run_dir.join(CONFIG_FILE)), &Overrides::default())?;
    let raw_dim = cfg.env_settings().build(0).map_err(TrainError::from)?.spec().state_dim;
    let archive = Archive::load(&run_dir.join(ARCHIVE_DIR), raw_dim, cfg.intrinsic.archive_max_points)?;
    Ok((cfg, archive))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub itr: usize,
    pub pbt: usize,
    pub itr_seconds: f64,
    pub pbt_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub landmarks: usize,
    pub steps_per_iteration: usize,
    pub seeds: Vec<SeedComparison>,
    pub itr_mean: f64,
    pub itr_std: f64,
    pub pbt_mean: f64,
    pub pbt_std: f64,
    pub checks: Vec<Check>,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOptions {
    pub landmarks: usize,
    pub seeds: Vec<u64>,
    pub steps_per_iteration: usize,
    /// Apply the absolute thresholds; otherwise only require ITR above PBT.
    pub full_criteria: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Iterative versus population training on the navigation task: distinct
/// landmarks per seed, their mean and standard deviation.
pub fn compare_frameworks(
    opts: &ComparisonOptions,
    on_seed: &mut dyn FnMut(&SeedComparison),
) -> Result<ComparisonReport, CliError> {
    if opts.seeds.is_empty() {
        return Err(CliError::Data("no seeds given".into()));
    }
    let mut cfg = RunConfig::defaults(Algorithm::Itr, EnvKind::Nav);
    cfg.nav.n_landmarks = opts.landmarks;
    cfg.trainer.population = opts.landmarks;
    cfg.trainer.steps_per_iteration = opts.steps_per_iteration;
    cfg.validate()?;
    let env = cfg.env_settings();
    let mut seeds = Vec::new();
    for &seed in &opts.seeds {
        let t = std::time::Instant::now();
        let itr = itr_run(&cfg.trainer, Some(&cfg.intrinsic), &env, seed, &mut |_| {})?;
        let itr_seconds = t.elapsed().as_secs_f64();
        let t = std::time::Instant::now();
        let pbt = pbt_run(&cfg.trainer, &cfg.intrinsic, &env, seed, &mut |_| {})?;
        let row = SeedComparison {
            seed,
            itr: count_distinct_landmarks(&itr.evals),
            pbt: count_distinct_landmarks(&pbt.evals),
            itr_seconds,
            pbt_seconds: t.elapsed().as_secs_f64(),
        };
        on_seed(&row);
        seeds.push(row);
    }
    let (itr_mean, itr_std) = mean_std(&seeds.iter().map(|s| s.itr as f64).collect::<Vec<_>>());
    let (pbt_mean, pbt_std) = mean_std(&seeds.iter().map(|s| s.pbt as f64).collect::<Vec<_>>());
    let check = |name: String, passed: bool| Check { name, passed };
    let checks = match (opts.full_criteria, opts.landmarks) {
        (true, 4) => vec![
            check(format!("ITR mean {itr_mean:.2} >= 3.0"), itr_mean >= 3.0),
            check(format!("PBT mean {pbt_mean:.2} <= ITR mean - 0.5"), pbt_mean <= itr_mean - 0.5),
        ],
        (true, 5) => vec![check(format!("ITR mean {itr_mean:.2} >= 3.5"), itr_mean >= 3.5)],
        _ => vec![check(format!("ITR mean {itr_mean:.2} > PBT mean {pbt_mean:.2}"), itr_mean > pbt_mean)],
    };
    Ok(ComparisonReport {
        landmarks: opts.landmarks,
        steps_per_iteration: opts.steps_per_iteration,
        seeds,
        itr_mean,
        itr_std,
        pbt_mean,
        pbt_std,
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    #[serde(flatten)]
    pub report: Theorem1Report,
    pub worst_case: WorstCase,
    pub worst_case_holds: bool,
}

impl TheoremCheck {
    pub fn passed(&self) -> bool {
        self.report.violations.is_empty() && self.worst_case_holds
    }
}

pub fn theorem_check(n: usize, seed: u64) -> Result<TheoremCheck, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = verify_theorem1(n, &GeneratorConfig::default(), &mut rng)?;
    let wc = worst_case()?;
    Ok(TheoremCheck { report, worst_case_holds: wc.holds(), worst_case: wc })
}

/// One calibrated SIPO-RBF run on the grid world, judged on greedy rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSeedResult {
    pub seed: u64,
    pub delta: f64,
    pub alpha: f64,
    pub returns: Vec<f64>,
    /// Visited cells, start included.
    pub paths: Vec<Vec<[usize; 2]>>,
    /// State-EMD between greedy paths in grid units, unit mass per state.
    pub emd: Vec<Vec<f64>>,
    /// Largest set of policies with return 1 whose pairwise EMD exceeds
    /// `max(δ, 0)`.
    pub diverse: usize,
}

fn largest_clique(n: usize, member: impl Fn(usize) -> bool, edge: impl Fn(usize, usize) -> bool) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if set.len() > best
            && set.iter().all(|&i| member(i))
            && set.iter().enumerate().all(|(k, &i)| set[k + 1..].iter().all(|&j| edge(i, j)))
        {
            best = set.len();
        }
    }
    best
}

/// Calibrates `δ` and `α` from two unconstrained runs, trains `population`
/// policies with SIPO-RBF and measures their greedy paths.
pub fn grid_sipo_seed(size: usize, population: usize, steps: usize, seed: u64) -> Result<GridSeedResult, CliError> {
    if population > 16 {
        return Err(CliError::Data(format!("population {population} is too large to enumerate")));
    }
    let mut cfg = RunConfig::defaults(Algorithm::SipoRbf, EnvKind::Gridworld);
    cfg.grid_size = size;
    cfg.trainer.population = population;
    cfg.trainer.steps_per_iteration = steps;
    cfg.validate()?;
    let env_settings = cfg.env_settings();
    let cal = calibrate(&cfg.trainer, &cfg.intrinsic, &env_settings, seed, 1.0)?;
    cfg.trainer.delta = cal.delta;
    cfg.intrinsic.alpha = cal.alpha;
    let out = itr_run(&cfg.trainer, Some(&cfg.intrinsic), &env_settings, seed, &mut |_| {})?;

    let mut env = env_settings.build(0).map_err(TrainError::from)?;
    let scale = (size - 1) as f64;
    let mut returns = Vec::new();
    let mut paths = Vec::new();
    for (i, p) in out.policies.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Evaluation, i as u64, 1);
        let ev = evaluate(p, env.as_mut(), 1, true, &mut rng)?;
        returns.push(ev.mean_return());
        let cells = ev.episodes[0]
            .states
            .iter()
            .map(|s| [(s[0] * scale).round() as usize, (s[1] * scale).round() as usize])
            .collect::<Vec<_>>();
        paths.push(cells);
    }
    let clouds = paths
        .iter()
        .map(|p| StateCloud::new(p.iter().map(|c| vec![c[0] as f64, c[1] as f64]).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let m = paths.len();
    let mut emd_matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let len = (paths[i].len() + paths[j].len()) as f64 / 2.0;
            let d = emd(&clouds[i], &clouds[j], euclidean)?.cost * len;
            emd_matrix[i][j] = d;
            emd_matrix[j][i] = d;
        }
    }
    let floor = cal.delta.max(0.0);
    let diverse = largest_clique(m, |i| returns[i] == 1.0, |i, j| emd_matrix[i][j] > floor);
    Ok(GridSeedResult { seed, delta: cal.delta, alpha: cal.alpha, returns, paths, emd: emd_matrix, diverse })
}

pub fn format_table1(cells: &[Cell]) -> String {
    let mut out = String::from("pair      measure     value         reference     result\n");
    for c in cells {
        let pair = format!("(pi{}, pi{})", c.pair.0, c.pair.1);
        let status = if c.passes() { "ok" } else { "FAIL" };
        writeln!(out, "{pair:<10}{:<12}{:<14.6}{:<14.6}{status}", c.measure, c.value, c.expected).unwrap();
    }
    out
}

#[derive(Debug, Parser)]
#[command(name = "sipo", version, about = "Diverse policy discovery with state-distance constraints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a population and write metrics, checkpoints and the archive.
    Train(TrainArgs),
    /// Estimate the threshold and reward scale from two unconstrained runs.
    Calibrate(CalibrateArgs),
    /// Pairwise diversity and entropy of a finished run.
    Eval(EvalArgs),
    /// Print every measure for the five hand-built grid-world policies.
    ReproduceTable1,
    /// Compare greedy and exact solutions on random 1-D instances.
    VerifyTheorem1(VerifyArgs),
    /// Distinct landmarks of iterative versus population training.
    CompareFrameworks(CompareArgs),
    /// Visit counts of archived positions as a CSV grid.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            algorithm: self.algo,
            env: self.env,
            seed: self.seed,
            out_dir: self.out.clone(),
            freeze_lambda: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Hold every multiplier at this value.
    #[arg(long)]
    pub freeze_lambda: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1.0)]
    pub c2: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 256)]
    pub emd_points: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 4)]
    pub landmarks: usize,
    #[arg(long, default_value_t = 6)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Only require the ITR mean to exceed the PBT mean.
    #[arg(long)]
    pub trend_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Cells per axis; defaults to the grid size or 20 for the arena.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Restrict to one policy of the archive.
    #[arg(long)]
    pub policy: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Executes one subcommand. `Ok(false)` means a check did not pass.
pub fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train(args) => {
            let overrides = Overrides { freeze_lambda: args.freeze_lambda, ..args.run.overrides() };
            let cfg = load_config(args.run.config.as_deref(), &overrides)?;
            echo_config(&cfg)?;
            let mut last_iteration = usize::MAX;
            let out = train(&cfg, &mut |r| {
                if r.iteration != last_iteration {
                    eprintln!("iteration {} running, step {}", r.iteration, r.step);
                    last_iteration = r.iteration;
                }
            })?;
            let summary = write_run(&cfg, &out)?;
            println!("{}", to_json(&summary)?);
            Ok(true)
        }
        Command::Calibrate(args) => {
            let cfg = load_config(args.run.config.as_deref(), &args.run.overrides())?;
            let report: CalibrationReport =
                calibrate(&cfg.trainer, &cfg.intrinsic, &cfg.env_settings(), cfg.seed, args.c2)?;
            let mut tuned = cfg.clone();
            tuned.trainer.delta = report.delta;
            tuned.intrinsic.alpha = report.alpha;
            tuned.validate()?;
            echo_config(&tuned)?;
            write_atomic(&cfg.out_dir.join("calibration.json"), to_json(&report)?.as_bytes())?;
            println!("{}", to_json(&report)?);
            Ok(true)
        }
        Command::Eval(args) => {
            let (cfg, archive) = load_run_archive(&args.run)?;
            let opts = EvalOptions {
                k: args.k,
                emd_points: args.emd_points,
                scale: position_scale(&cfg),
                ..EvalOptions::default()
            };
            let report = eval_population(&archive, &opts)?;
            let json = to_json(&report)?;
            write_atomic(&args.run.join("eval.json"), json.as_bytes())?;
            println!("{json}");
            Ok(true)
        }
        Command::ReproduceTable1 => {
            let cells = comparison_table()?;
            print!("{}", format_table1(&cells));
            Ok(cells.iter().all(Cell::passes))
        }
        Command::VerifyTheorem1(args) => {
            let check = theorem_check(args.n, args.seed)?;
            println!("{}", to_json(&check)?);
            Ok(check.passed())
        }
        Command::CompareFrameworks(args) => {
            let opts = ComparisonOptions {
                landmarks: args.landmarks,
                seeds: (args.first_seed..args.first_seed + args.seeds).collect(),
                steps_per_iteration: args.steps.unwrap_or(TrainerConfig::nav().steps_per_iteration),
                full_criteria: !args.trend_only,
            };
            let report = compare_frameworks(&opts, &mut |s| {
                eprintln!("seed {}: ITR {} landmarks, PBT {} landmarks", s.seed, s.itr, s.pbt);
            })?;
            println!(
                "ITR {:.2} ({:.2})  PBT {:.2} ({:.2})",
                report.itr_mean, report.itr_std, report.pbt_mean, report.pbt_std
            );
            for c in &report.checks {
                println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            if let Some(path) = &args.out {
                write_atomic(path, to_json(&report)?.as_bytes())?;
            }
            Ok(report.passed())
        }
        Command::ExportHeatmap(args) => {
            let (cfg, archive) = load_run_archive(&args.run)?;
            let raw_dim = archive.raw_dim();
            let trajs: Vec<Vec<[f64; 2]>> = archive
                .entries()
                .iter()
                .enumerate()
                .filter(|(i, _)| args.policy.is_none_or(|p| p == *i))
                .flat_map(|(_, e)| entry_trajectories(e, raw_dim, 1.0))
                .collect();
            let grid = match cfg.env {
                EnvKind::Gridworld => HeatmapGrid::gridworld(cfg.grid_size),
                EnvKind::Nav => HeatmapGrid::arena(cfg.nav.half_width, 20),
            };
            let grid = HeatmapGrid { resolution: args.resolution.unwrap_or(grid.resolution), ..grid };
            let csv = heatmap_csv(&export_heatmap(&trajs, &grid));
            let path = args.out.unwrap_or_else(|| args.run.join("heatmap.csv"));
            write_atomic(&path, csv.as_bytes())?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clique_respects_members_and_edges() {
        // 0-1-2 form a triangle, 3 touches everyone but is excluded
        let edges = [(0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3)];
        let edge = |i: usize, j: usize| edges.contains(&(i.min(j), i.max(j)));
        assert_eq!(largest_clique(4, |_| true, edge), 4);
        assert_eq!(largest_clique(4, |i| i != 3, edge), 3);
        assert_eq!(largest_clique(4, |_| true, |i, j| i + j == 1), 2);
        assert_eq!(largest_clique(3, |_| false, edge), 0);
    }

    #[test]
    fn empty_nav_file_gives_nav_defaults() {
        let cfg = parse_config("", &Overrides { env: Some(EnvKind::Nav), ..Overrides::default() }).unwrap();
        assert_eq!(cfg.trainer.discount, 0.997);
        assert_eq!(cfg.trainer.batch_size, 4000);
        assert_eq!(cfg.trainer.lambda_max, 10.0);
        assert_eq!(cfg.intrinsic.kind, IntrinsicKind::FinalState);
    }

    #[test]
    fn negative_lambda_max_names_the_key() {
        let err = parse_config("trainer.lambda_max = -1", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("trainer.lambda_max"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        let err = parse_config("trainer.lambda_maxx = 1.0", &Overrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "trainer.lambda_maxx"), "{err}");
        let err = parse_config("trainer.discount = \"high\"", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("trainer.discount"), "{err}");
        let err = parse_config("trainer.epochs = -3", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("trainer.epochs"), "{err}");
        let err = parse_config("intrinsic.kind = \"cosine\"", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("intrinsic.kind"), "{err}");
    }

    #[test]
    fn integers_accepted_for_floats() {
        let cfg = parse_config("[trainer]\nlambda_max = 5\nfreeze_lambda = 0", &Overrides::default()).unwrap();
        assert_eq!(cfg.trainer.lambda_max, 5.0);
        assert_eq!(cfg.trainer.freeze_lambda, Some(0.0));
    }

    #[test]
    fn algorithm_and_intrinsic_kind_must_agree() {
        let o = Overrides { algorithm: Some(Algorithm::SipoRbf), ..Overrides::default() };
        let err = parse_config("intrinsic.kind = \"wd\"", &o).unwrap_err();
        assert!(err.to_string().contains("intrinsic.kind"), "{err}");
    }

    #[test]
    fn algorithm_tags_parse() {
        for tag in ["sipo-rbf", "sipo-wd", "pbt", "ppo", "itr"] {
            let a: Algorithm = tag.parse().unwrap();
            assert_eq!(a.to_string(), tag);
        }
    }

    #[test]
    fn stationary_trajectory_fills_one_cell() {
        let grid = HeatmapGrid::arena(1.0, 10);
        let counts = export_heatmap(&[vec![[0.33, -0.71]; 17]], &grid);
        let nonzero: Vec<u64> = counts.iter().flatten().copied().filter(|&c| c > 0).collect();
        assert_eq!(nonzero, vec![17]);
        let empty = export_heatmap(&[], &grid);
        assert!(empty.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn metrics_csv_leaves_missing_constraints_empty() {
        let row = MetricsRow {
            iteration: 1,
            step: 4000,
            j_hat: 0.5,
            r_int: vec![Some(0.25), None],
            lambda: vec![Some(1.5), None],
            wall_time: 3.0,
        };
        let csv = metrics_csv(&[row], 2);
        assert_eq!(csv, "iteration,step,J_hat,R_int_0,R_int_1,lambda_0,lambda_1\n1,4000,0.5,0.25,,1.5,\n");
    }
}
