//! Command-line pipeline: fixture → sensitivity → allocate → rollout, plus
//! an invariant/oracle `verify` suite.
//!
//! Every command reads its inputs from files, writes its outputs into the
//! output directory, and is byte-for-byte reproducible for a given seed and
//! any worker count.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocator::{
    brute_force_allocate, greedy_allocate, objective, synthetic_convex_table, synthetic_random_table,
    AllocationSummary, PruneGuardConfig, DEFAULT_PRUNE_CAP, DEFAULT_TAU_REL,
};
use crate::error::{Error, Result};
use crate::model::{ChannelId, PolicyModel, Tag};
use crate::quant::{apply_allocation, dequantize_row, BitMap, BitWidth, WeightScheme};
use crate::sensitivity::{
    cumulative_table, rank_consistency, CalibrationSet, CumulativeConfig, Method, SensitivityEngine,
    SensitivityTable, DEFAULT_CALIB_TRAJECTORIES, DEFAULT_EPISODES,
};
use crate::simenv::{
    fit_reference_policy, make_calibration, rollout_pair, teacher_forced_mse, DeviationMode, EnvConfig,
    Environment, RolloutReport,
};

pub const MODEL_FILE: &str = "model.json";
pub const ENV_FILE: &str = "env.json";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";
pub const BITMAP_FILE: &str = "bitmap.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "ACTBIT_THREADS";
/// Default rollout episodes for `rollout`.
pub const DEFAULT_ROLLOUT_EPISODES: usize = 64;
/// Default refine fraction of the two-stage scorer.
pub const DEFAULT_REFINE: f64 = 0.25;
/// Default average-bit budget.
pub const DEFAULT_BUDGET: f64 = 8.0;

/// Settings shared by every command. Every field has a default, so a bare
/// `fixture` → `sensitivity` → `allocate` → `rollout` sequence completes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model file; defaults to `<out>/model.json`.
    pub model: Option<PathBuf>,
    /// Environment config; defaults to `<out>/env.json` if present, else the
    /// built-in defaults.
    pub env: Option<PathBuf>,
    /// Sensitivity CSV; defaults to `<out>/sensitivity.csv`.
    pub sensitivity: Option<PathBuf>,
    /// Bit-map JSON; defaults to `<out>/bitmap.json`.
    pub bitmap: Option<PathBuf>,
    pub budget: f64,
    pub act_bits: BitWidth,
    pub calib_traj: usize,
    /// Episode length; overrides the environment file when set (default 32).
    pub horizon: Option<usize>,
    pub refine: f64,
    pub prune_cap: f64,
    pub tau_abs: Option<f64>,
    pub tau_rel: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub oracle: bool,
    pub divergence: bool,
    pub episodes: usize,
    pub tags: Vec<Tag>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            env: None,
            sensitivity: None,
            bitmap: None,
            budget: DEFAULT_BUDGET,
            act_bits: BitWidth::FULL,
            calib_traj: DEFAULT_CALIB_TRAJECTORIES,
            horizon: None,
            refine: DEFAULT_REFINE,
            prune_cap: DEFAULT_PRUNE_CAP,
            tau_abs: None,
            tau_rel: DEFAULT_TAU_REL,
            seed: 0,
            out: PathBuf::from("actbit-out"),
            oracle: false,
            divergence: false,
            episodes: DEFAULT_ROLLOUT_EPISODES,
            tags: Tag::DEFAULT_DESIGNATED.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.budget > 0.0 && self.budget <= 16.0) {
            return bad(format!("--budget must be in (0, 16], got {}", self.budget));
        }
        if !matches!(self.act_bits.bits(), 4 | 8 | 16) {
            return bad(format!("--act-bits must be 4, 8 or 16, got {}", self.act_bits));
        }
        if self.calib_traj == 0 {
            return bad("--calib-traj must be >= 1".into());
        }
        if self.horizon == Some(0) {
            return bad("--horizon must be >= 1".into());
        }
        if !(self.refine > 0.0 && self.refine <= 1.0) {
            return bad(format!("--refine must be in (0, 1], got {}", self.refine));
        }
        if !(0.0..=1.0).contains(&self.prune_cap) {
            return bad(format!("--prune-cap must be in [0, 1], got {}", self.prune_cap));
        }
        if self.tau_abs.is_some_and(|t| t.is_nan() || t < 0.0) || self.tau_rel.is_nan() || self.tau_rel < 0.0 {
            return bad("prune thresholds must be non-negative".into());
        }
        if self.episodes == 0 {
            return bad("--episodes must be >= 1".into());
        }
        if self.tags.is_empty() {
            return bad("--tags must name at least one tag".into());
        }
        Ok(())
    }

    fn file(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn model_path(&self) -> PathBuf {
        self.file(&self.model, MODEL_FILE)
    }

    pub fn sensitivity_path(&self) -> PathBuf {
        self.file(&self.sensitivity, SENSITIVITY_FILE)
    }

    pub fn bitmap_path(&self) -> PathBuf {
        self.file(&self.bitmap, BITMAP_FILE)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let default_path = self.out.join(ENV_FILE);
        let mut cfg = match &self.env {
            Some(p) => EnvConfig::load(p)?,
            None if default_path.exists() => EnvConfig::load(&default_path)?,
            None => EnvConfig::default(),
        };
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prune_guard(&self) -> PruneGuardConfig {
        PruneGuardConfig {
            tau_abs: self.tau_abs,
            tau_rel: self.tau_rel,
            prune_cap: self.prune_cap,
        }
    }

    fn load_model(&self) -> Result<PolicyModel> {
        PolicyModel::load(&self.model_path())
    }

    fn calibration(&self, env: &Environment, model: &PolicyModel) -> Result<CalibrationSet> {
        make_calibration(env, model, self.calib_traj, self.seed)
    }

    fn designated(&self, model: &PolicyModel) -> Result<Vec<ChannelId>> {
        let channels = model.channels(Some(&self.tags));
        if channels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no layer of the model carries any of the tags {:?}",
                self.tags
            )));
        }
        Ok(channels)
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }
}

/// Worker cap from `ACTBIT_THREADS`; `None` when unset or empty.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Paths written by [`cmd_fixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutput {
    pub model_path: PathBuf,
    pub env_path: PathBuf,
    pub residual_rms: f64,
    pub residual_bound: f64,
}

/// Writes the seeded reference policy and the default environment config.
pub fn cmd_fixture(seed: u64, out: &Path) -> Result<FixtureOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let env_cfg = EnvConfig::default();
    let fit = fit_reference_policy(&env_cfg, seed)?;
    let model_path = out.join(MODEL_FILE);
    let env_path = out.join(ENV_FILE);
    fit.model.save(&model_path)?;
    env_cfg.save(&env_path)?;
    PolicyModel::load(&model_path)?;
    Ok(FixtureOutput {
        model_path,
        env_path,
        residual_rms: fit.residual_rms,
        residual_bound: fit.residual_bound,
    })
}

/// Two-stage scores for the designated channels, written as CSV.
pub fn cmd_sensitivity(cfg: &RunConfig) -> Result<SensitivityTable> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let env = Environment::new(cfg.env_config()?)?;
    let calib = cfg.calibration(&env, &model)?;
    let channels = cfg.designated(&model)?;
    let table = SensitivityEngine::new(&model, &calib)?.two_stage(&channels, cfg.refine)?;
    cfg.ensure_out()?;
    table.save(&cfg.sensitivity_path())?;
    Ok(table)
}

/// Greedy allocation under `--budget`; writes the bit map and summary.
pub fn cmd_allocate(cfg: &RunConfig) -> Result<AllocationSummary> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let table = SensitivityTable::load(&cfg.sensitivity_path())?;
    let channels = cfg.designated(&model)?;
    let alloc = greedy_allocate(&table, &channels, cfg.budget, &cfg.prune_guard())?;
    let mut summary = AllocationSummary::new(&table, &alloc)?;
    if cfg.oracle {
        let best = brute_force_allocate(&table, &channels, cfg.budget)?;
        summary = summary.with_oracle(objective(&table, &best)?);
    }
    let bitmap = BitMap::from_allocation(&model, &alloc, cfg.act_bits, WeightScheme::Symmetric)?;
    cfg.ensure_out()?;
    bitmap.save(&cfg.bitmap_path())?;
    write_file(&cfg.out.join(SUMMARY_FILE), &summary.to_json_string())?;
    Ok(summary)
}

/// Closed-loop comparison of the quantized policy against full precision.
pub fn cmd_rollout(cfg: &RunConfig) -> Result<RolloutReport> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let env = Environment::new(cfg.env_config()?)?;
    let bitmap = BitMap::load(&cfg.bitmap_path())?;
    let alloc = bitmap.to_allocation(cfg.budget)?;
    let calib = cfg.calibration(&env, &model)?;
    let q = apply_allocation(&model, &alloc, bitmap.activation_bits()?, &calib)?;
    let mode = if cfg.divergence {
        DeviationMode::Divergence
    } else {
        DeviationMode::LockStep
    };
    let report = rollout_pair(&env, &model, &q, cfg.episodes, cfg.seed, mode)?
        .with_teacher_forced_mse(teacher_forced_mse(&model, &q, &calib)?);
    cfg.ensure_out()?;
    write_file(&cfg.out.join(REPORT_FILE), &report.to_json_string())?;
    write_file(&cfg.out.join(CURVE_FILE), &report.curve_csv())?;
    Ok(report)
}

/// Outcome of one `verify` check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn record(&mut self, name: &'static str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        self.checks.push(Check { name, passed, detail });
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(s, "{tag} {}: {}", c.name, c.detail).expect("string write");
        }
        s
    }
}

/// Central-difference step and relu kink margin used by the Jacobian checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_KINK_MARGIN: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-5;

fn check_jacobian(model: &PolicyModel, calib: &CalibrationSet) -> Result<(bool, String)> {
    let channels = model.channels(None);
    let stride = channels.len().div_ceil(64).max(1);
    let (mut worst, mut n, mut skipped) = (0.0f64, 0usize, 0usize);
    for &ch in channels.iter().step_by(stride) {
        for obs in calib.observations().iter().step_by(calib.len().div_ceil(4).max(1)) {
            match model.jacobian_fd_error(obs, ch, FD_STEP, FD_KINK_MARGIN)? {
                Some(e) => {
                    worst = worst.max(e);
                    n += 1;
                }
                None => skipped += 1,
            }
        }
    }
    Ok((
        worst <= FD_TOLERANCE,
        format!("max relative error {worst:.3e} over {n} columns ({skipped} skipped at relu kinks)"),
    ))
}

fn check_round_trip(model: &PolicyModel) -> Result<(bool, String)> {
    let (mut rows, mut worst) = (0usize, 0.0f64);
    for layer in model.layers() {
        for r in 0..layer.out_dim() {
            let row = layer.weight.row(r);
            for bit in BitWidth::GRID {
                let (deq, p) = dequantize_row(row, bit, WeightScheme::Symmetric);
                for (d, w) in deq.iter().zip(row) {
                    worst = worst.max((d - w).abs() - p.scale / 2.0);
                }
                rows += 1;
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{rows} row round-trips; max excess over scale/2 = {worst:.3e}"),
    ))
}

/// Oracle comparisons on seeded 6-channel synthetic instances: the oracle is
/// never worse than greedy, both meet the budget, greedy is minimal, and on
/// convex instances greedy matches the oracle whenever it uses the full bit
/// capacity (it is then the LP-relaxation optimum).
fn check_oracle(seed: u64) -> Result<(bool, String)> {
    const N: usize = 6;
    let (mut trials, mut tight, mut problems) = (0usize, 0usize, Vec::new());
    for i in 0..50u64 {
        for convex in [true, false] {
            let s = seed.wrapping_mul(1000).wrapping_add(i);
            let (table, channels) = if convex {
                synthetic_convex_table(N, s)
            } else {
                synthetic_random_table(N, s)
            };
            let g = greedy_allocate(&table, &channels, DEFAULT_BUDGET, &PruneGuardConfig::permissive())?;
            let o = brute_force_allocate(&table, &channels, DEFAULT_BUDGET)?;
            let (og, oo) = (objective(&table, &g)?, objective(&table, &o)?);
            trials += 1;
            if !g.satisfies_budget() || !o.satisfies_budget() || !g.is_minimal() {
                problems.push(format!("instance {s}: budget/minimality"));
            }
            if oo > og * (1.0 + 1e-12) {
                problems.push(format!("instance {s}: oracle {oo} worse than greedy {og}"));
            }
            if convex && g.total_bits() == (DEFAULT_BUDGET as u64) * N as u64 {
                tight += 1;
                if (og - oo).abs() > 1e-12 * oo.max(1e-300) {
                    problems.push(format!("convex instance {s}: greedy {og} != oracle {oo} at full capacity"));
                }
            }
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("{trials} instances; {tight} full-capacity convex instances match the oracle exactly")
    } else {
        problems.join("; ")
    };
    Ok((ok, detail))
}

fn check_rank_consistency(cfg: &RunConfig, model: &PolicyModel, env: &Environment, calib: &CalibrationSet) -> Result<(bool, String)> {
    let channels = cfg.designated(model)?;
    let eng = SensitivityEngine::new(model, calib)?;
    let mut exact = SensitivityTable::new();
    let mut proxy = SensitivityTable::new();
    for &ch in &channels {
        exact.insert(ch, BitWidth::FOUR, eng.exact(ch, BitWidth::FOUR)?, Method::ExactSingleStep)?;
        proxy.insert(ch, BitWidth::FOUR, eng.proxy(ch, BitWidth::FOUR)?, Method::Proxy)?;
    }
    let rho_proxy = rank_consistency(&exact, &proxy, BitWidth::FOUR)?;
    let cc = CumulativeConfig {
        horizon: env.config().horizon,
        episodes: DEFAULT_EPISODES,
        seed: cfg.seed,
    };
    let cumul = cumulative_table(model, env, &channels, &[BitWidth::FOUR], &cc)?;
    let rho_cumul = rank_consistency(&exact, &cumul, BitWidth::FOUR)?;
    Ok((
        rho_proxy >= 0.8 && rho_cumul >= 0.8,
        format!("Spearman at 4 bits: proxy/exact {rho_proxy:.4}, single-step/cumulative {rho_cumul:.4} (need >= 0.8)"),
    ))
}

fn check_sensitivity_file(path: &Path, channels: &[ChannelId]) -> Result<(bool, String)> {
    let table = SensitivityTable::load(path)?;
    table.check_complete(channels)?;
    Ok((true, format!("{} rows parsed from {}", table.len(), path.display())))
}

fn check_bitmap(cfg: &RunConfig, model: &PolicyModel) -> Result<(bool, String)> {
    let path = cfg.bitmap_path();
    let bitmap = BitMap::load(&path)?;
    let alloc = bitmap.to_allocation(cfg.budget)?;
    let mut problems = Vec::new();
    let avg = alloc.total_bits() as f64 / alloc.assignment().len().max(1) as f64;
    if !alloc.satisfies_budget() {
        problems.push(format!("average bits {avg:.4} exceed budget {}", cfg.budget));
    }
    for a in &bitmap.assignments {
        let ch = ChannelId::new(a.layer, a.channel);
        let layer = model.check_channel(ch)?;
        let (_, p) = dequantize_row(layer.weight.row(ch.channel), BitWidth::new(a.bits)?, WeightScheme::Symmetric);
        if p.scale != a.scale || p.zero_point != a.zero_point {
            problems.push(format!("{ch}: stored scale/zero-point do not match the model"));
        }
    }
    if let Err(e) = bitmap.activation_bits() {
        problems.push(e.to_string());
    }
    let ok = problems.is_empty();
    Ok((
        ok,
        if ok {
            format!("average bits {avg:.4} <= budget {}", cfg.budget)
        } else {
            problems.join("; ")
        },
    ))
}

fn check_rng(seed: u64) -> Result<(bool, String)> {
    let draw = || ChaCha8Rng::seed_from_u64(seed).random::<u64>();
    Ok((draw() == draw(), "seeded generator is reproducible".into()))
}

/// Invariant and oracle suite over the files in the output directory.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut report = VerifyReport::default();
    let model = match cfg.load_model() {
        Ok(m) => {
            report.record("model_valid", Ok((true, format!("{} channels", m.num_channels()))));
            Some(m)
        }
        Err(e) => {
            report.record("model_valid", Err(e));
            None
        }
    };
    report.record("quantizer_round_trip", match &model {
        Some(m) => check_round_trip(m),
        None => Ok((false, "no model".into())),
    });
    report.record("greedy_vs_oracle", check_oracle(cfg.seed));
    report.record("determinism", check_rng(cfg.seed));
    if let Some(model) = &model {
        let setup = cfg
            .env_config()
            .and_then(Environment::new)
            .and_then(|env| Ok((cfg.calibration(&env, model)?, env)));
        match setup {
            Ok((calib, env)) => {
                report.record("jacobian_fd", check_jacobian(model, &calib));
                report.record("rank_consistency", check_rank_consistency(cfg, model, &env, &calib));
            }
            Err(e) => report.record("environment", Err(e)),
        }
        let sens = cfg.sensitivity_path();
        if sens.exists() {
            report.record(
                "sensitivity_csv",
                cfg.designated(model).and_then(|c| check_sensitivity_file(&sens, &c)),
            );
        }
        if cfg.bitmap_path().exists() {
            report.record("bitmap_budget", check_bitmap(cfg, model));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "actbit", version, about = "Channel-wise mixed-precision quantization for small policy networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the seeded reference policy (model.json) and env config (env.json).
    Fixture(CommonArgs),
    /// Score designated channels (two-stage) and write sensitivity.csv.
    Sensitivity(CommonArgs),
    /// Greedy bit allocation; writes bitmap.json and summary.json.
    Allocate(CommonArgs),
    /// Closed-loop rollout of the quantized policy; writes report.json and curve.csv.
    Rollout(CommonArgs),
    /// Run the invariant/oracle suite; exits nonzero on any failure.
    Verify(CommonArgs),
}

fn parse_bits(s: &str) -> std::result::Result<BitWidth, String> {
    s.parse::<u32>()
        .map_err(|e| e.to_string())
        .and_then(|b| BitWidth::new(b).map_err(|e| e.to_string()))
}

fn parse_tag(s: &str) -> std::result::Result<Tag, String> {
    s.parse::<Tag>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model JSON [default: <out>/model.json]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Environment config JSON [default: <out>/env.json when present]
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Sensitivity CSV [default: <out>/sensitivity.csv]
    #[arg(long)]
    pub sensitivity: Option<PathBuf>,
    /// Bit-map JSON [default: <out>/bitmap.json]
    #[arg(long)]
    pub bitmap: Option<PathBuf>,
    /// Average-bit budget over designated channels, in (0, 16].
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: f64,
    /// Activation bit-width for hidden layers (4, 8 or 16).
    #[arg(long, default_value = "16", value_parser = parse_bits)]
    pub act_bits: BitWidth,
    /// Calibration trajectories.
    #[arg(long, default_value_t = DEFAULT_CALIB_TRAJECTORIES)]
    pub calib_traj: usize,
    /// Episode length T [default: 32, or the env file's value].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Fraction of channels refined with exact scores.
    #[arg(long, default_value_t = DEFAULT_REFINE)]
    pub refine: f64,
    /// Largest fraction of designated channels that may be pruned.
    #[arg(long, default_value_t = DEFAULT_PRUNE_CAP)]
    pub prune_cap: f64,
    /// Absolute ceiling on a pruned channel's 0-bit score [default: 1e-4 · mean 2-bit score].
    #[arg(long)]
    pub tau_abs: Option<f64>,
    /// Relative ceiling on s0 − s2 against its median.
    #[arg(long, default_value_t = DEFAULT_TAU_REL)]
    pub tau_rel: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "actbit-out")]
    pub out: PathBuf,
    /// Also run the brute-force oracle (at most 8 designated channels).
    #[arg(long)]
    pub oracle: bool,
    /// Measure deviation between independently evolving trajectories (exploratory).
    #[arg(long)]
    pub divergence: bool,
    /// Rollout episodes.
    #[arg(long, default_value_t = DEFAULT_ROLLOUT_EPISODES)]
    pub episodes: usize,
    /// Designated layer tags.
    #[arg(long, value_delimiter = ',', default_value = "vision,backbone", value_parser = parse_tag)]
    pub tags: Vec<Tag>,
}

impl From<CommonArgs> for RunConfig {
    fn from(a: CommonArgs) -> Self {
        RunConfig {
            model: a.model,
            env: a.env,
            sensitivity: a.sensitivity,
            bitmap: a.bitmap,
            budget: a.budget,
            act_bits: a.act_bits,
            calib_traj: a.calib_traj,
            horizon: a.horizon,
            refine: a.refine,
            prune_cap: a.prune_cap,
            tau_abs: a.tau_abs,
            tau_rel: a.tau_rel,
            seed: a.seed,
            out: a.out,
            oracle: a.oracle,
            divergence: a.divergence,
            episodes: a.episodes,
            tags: a.tags,
        }
    }
}

fn histogram_line(summary: &AllocationSummary) -> String {
    let hist: Vec<String> = summary.histogram.iter().map(|(b, n)| format!("{b}:{n}")).collect();
    let mut s = format!(
        "avg_bits {:.4} | histogram {} | pruned {:.2}% | objective {:.6e}",
        summary.avg_bits,
        hist.join(" "),
        100.0 * summary.pruned_fraction,
        summary.objective
    );
    if let (Some(o), Some(g)) = (summary.oracle_objective, summary.oracle_gap) {
        write!(s, " | oracle {o:.6e} gap {:.3}%", 100.0 * g).expect("string write");
    }
    s
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Fixture(a) => {
            let out = cmd_fixture(a.seed, &a.out)?;
            println!(
                "wrote {} and {} (fit residual RMS {:.4}, bound {:.4})",
                out.model_path.display(),
                out.env_path.display(),
                out.residual_rms,
                out.residual_bound
            );
        }
        Command::Sensitivity(a) => {
            let cfg = RunConfig::from(a);
            let table = cmd_sensitivity(&cfg)?;
            let exact = table.iter().filter(|(_, _, e)| e.method == Method::ExactSingleStep).count();
            println!(
                "wrote {} ({} rows, {} exact)",
                cfg.sensitivity_path().display(),
                table.len(),
                exact
            );
        }
        Command::Allocate(a) => {
            let cfg = RunConfig::from(a);
            let summary = cmd_allocate(&cfg)?;
            println!("{}", histogram_line(&summary));
        }
        Command::Rollout(a) => {
            let cfg = RunConfig::from(a);
            let r = cmd_rollout(&cfg)?;
            println!(
                "success rate {:.4} (full precision {:.4}) | final cumulative deviation {:.6e} | teacher-forced MSE {:.6e}",
                r.success_rate,
                r.baseline_success_rate,
                r.final_deviation_mean(),
                r.teacher_forced_mse.unwrap_or(0.0)
            );
        }
        Command::Verify(a) => {
            let cfg = RunConfig::from(a);
            let report = cmd_verify(&cfg)?;
            print!("{}", report.render());
            for c in report.failures() {
                eprintln!("invariant violated: {} ({})", c.name, c.detail);
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = threads_from_env().and_then(|t| with_threads(t, || dispatch(cli.command)).and_then(|r| r));
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
