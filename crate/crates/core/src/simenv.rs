//! Deterministic 2-D point-mass reach task.
//!
//! The agent observes `[px, py, vx, vy, gx, gy]` and commands a velocity;
//! `velocity' = clip(action)` and `position' = position + dt · velocity'`.
//! An episode succeeds when the final distance to the goal is within
//! `success_radius`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Layer, Policy, PolicyModel, Tag};
use crate::sensitivity::CalibrationSet;
use crate::tensor::{self, Matrix, Vector};

pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;

/// Named random sub-streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Fixture = 1,
    Calib = 2,
    Rollout = 3,
}

/// Generator for sub-stream `stream`, item `index` of run `seed`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Seconds per step.
    pub dt: f64,
    pub horizon: usize,
    /// Per-axis velocity limit (m/s).
    pub action_clip: f64,
    pub success_radius: f64,
    /// Starts and goals are drawn uniformly from a disk of this radius.
    pub workspace_radius: f64,
    /// Gain `k` of the proportional controller the reference policy imitates.
    pub gain: f64,
    /// Folded into every initial-state stream.
    pub init_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            horizon: 32,
            action_clip: 1.0,
            success_radius: 0.05,
            workspace_radius: 1.0,
            gain: 3.0,
            init_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.horizon >= 1
            && self.action_clip > 0.0
            && self.success_radius > 0.0
            && self.workspace_radius > 0.0
            && self.gain > 0.0
            && [self.dt, self.action_clip, self.success_radius, self.workspace_radius, self.gain]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid environment config {self:?}")))
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("env config serialization is infallible");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EnvConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub step: usize,
}

impl EnvState {
    pub fn distance_to_goal(&self) -> f64 {
        (self.position[0] - self.goal[0]).hypot(self.position[1] - self.goal[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    cfg: EnvConfig,
}

fn sample_disk(rng: &mut impl Rng, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    [r * theta.cos(), r * theta.sin()]
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Environment { cfg })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn check_policy(&self, p: &dyn Policy) -> Result<()> {
        if p.input_dim() != OBS_DIM || p.output_dim() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "policy maps {} -> {}, environment needs {OBS_DIM} -> {ACTION_DIM}",
                p.input_dim(),
                p.output_dim()
            )));
        }
        Ok(())
    }

    /// Start of episode `index` of sub-stream `stream`.
    pub fn initial_state(&self, seed: u64, stream: Stream, index: u64) -> EnvState {
        let mut rng = stream_rng(seed ^ self.cfg.init_seed, stream, index);
        EnvState {
            position: sample_disk(&mut rng, self.cfg.workspace_radius),
            velocity: [0.0; 2],
            goal: sample_disk(&mut rng, self.cfg.workspace_radius),
            step: 0,
        }
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f64> {
        vec![
            s.position[0],
            s.position[1],
            s.velocity[0],
            s.velocity[1],
            s.goal[0],
            s.goal[1],
        ]
    }

    pub fn step(&self, s: &EnvState, action: &[f64]) -> Result<EnvState> {
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "action has length {}, expected {ACTION_DIM}",
                action.len()
            )));
        }
        let clip = self.cfg.action_clip;
        let v = [action[0].clamp(-clip, clip), action[1].clamp(-clip, clip)];
        Ok(EnvState {
            position: [s.position[0] + self.cfg.dt * v[0], s.position[1] + self.cfg.dt * v[1]],
            velocity: v,
            goal: s.goal,
            step: s.step + 1,
        })
    }

    /// Controller the reference policy imitates: `k · (goal − position)`.
    pub fn expert_action(&self, obs: &[f64]) -> [f64; 2] {
        [self.cfg.gain * (obs[4] - obs[0]), self.cfg.gain * (obs[5] - obs[1])]
    }

    /// Closed-loop episode of a single policy; returns visited observations
    /// and the final state.
    pub fn run_episode(&self, policy: &dyn Policy, start: EnvState) -> Result<(Vec<Vec<f64>>, EnvState)> {
        let mut state = start;
        let mut seen = Vec::with_capacity(self.cfg.horizon);
        for _ in 0..self.cfg.horizon {
            let obs = self.observe(&state);
            let a = policy.act(&obs)?;
            state = self.step(&state, &a)?;
            seen.push(obs);
        }
        Ok((seen, state))
    }

    pub fn success_rate(&self, policy: &dyn Policy, episodes: usize, seed: u64) -> Result<f64> {
        self.check_policy(policy)?;
        let hits = (0..episodes)
            .into_par_iter()
            .map(|ep| {
                let (_, end) = self.run_episode(policy, self.initial_state(seed, Stream::Rollout, ep as u64))?;
                Ok(end.distance_to_goal() <= self.cfg.success_radius)
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.iter().filter(|h| **h).count() as f64 / episodes.max(1) as f64)
    }
}

/// Hidden widths of the reference policy.
pub const REFERENCE_HIDDEN: [usize; 2] = [64, 64];
const FIT_SAMPLES: usize = 4096;
const RIDGE: f64 = 1e-7;
/// Base weight gains of the vision and backbone layers. Small gains keep the
/// tanh units in their near-linear range so the fit meets its bound.
const VISION_GAIN: f64 = 0.3;
const BACKBONE_GAIN: f64 = 0.5;
/// Ratio between the largest and smallest per-row gain multiplier (drawn
/// log-uniformly). It gives the fixture the channel-level sensitivity
/// heterogeneity that mixed precision exploits.
const ROW_GAIN_SPREAD: f64 = 100.0;

/// Result of fitting the reference policy.
#[derive(Debug, Clone)]
pub struct ReferenceFit {
    pub model: PolicyModel,
    pub residual_rms: f64,
    pub residual_bound: f64,
}

fn gaussian_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize, gain: f64, tag: Tag) -> Result<Layer> {
    let half = ROW_GAIN_SPREAD.ln() / 2.0;
    let mut w = Vec::with_capacity(out * inp);
    for _ in 0..out {
        let std = gain * rng.random_range(-half..half).exp() / (inp as f64).sqrt();
        w.extend((0..inp).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
    }
    let b = (0..out).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    Layer::new(Matrix::new(out, inp, w)?, Vector::new(b)?, Activation::Tanh, tag)
}

/// Seeded fixture policy: vision (tanh) → backbone (tanh) → action head
/// (identity). Hidden layers are random; the head is the ridge least-squares
/// fit of `k · (goal − position)` on features of sampled states.
pub fn fit_reference_policy(cfg: &EnvConfig, seed: u64) -> Result<ReferenceFit> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Fixture, 0);
    let vision = gaussian_layer(&mut rng, REFERENCE_HIDDEN[0], OBS_DIM, VISION_GAIN, Tag::Vision)?;
    let backbone = gaussian_layer(&mut rng, REFERENCE_HIDDEN[1], REFERENCE_HIDDEN[0], BACKBONE_GAIN, Tag::Backbone)?;

    let env = Environment::new(*cfg)?;
    let clip = cfg.action_clip;
    let samples: Vec<Vec<f64>> = (0..FIT_SAMPLES)
        .map(|_| {
            let p = sample_disk(&mut rng, cfg.workspace_radius);
            let g = sample_disk(&mut rng, cfg.workspace_radius);
            let v = [rng.random_range(-clip..=clip), rng.random_range(-clip..=clip)];
            vec![p[0], p[1], v[0], v[1], g[0], g[1]]
        })
        .collect();

    let h = REFERENCE_HIDDEN[1];
    let mut features = DMatrix::<f64>::zeros(FIT_SAMPLES, h + 1);
    let mut targets = DMatrix::<f64>::zeros(FIT_SAMPLES, ACTION_DIM);
    let mut pre0 = vec![0.0; REFERENCE_HIDDEN[0]];
    let mut post0 = vec![0.0; REFERENCE_HIDDEN[0]];
    let mut pre1 = vec![0.0; h];
    let mut post1 = vec![0.0; h];
    for (i, obs) in samples.iter().enumerate() {
        vision.eval_into(obs, &mut pre0, &mut post0);
        backbone.eval_into(&post0, &mut pre1, &mut post1);
        for (j, f) in post1.iter().enumerate() {
            features[(i, j)] = *f;
        }
        features[(i, h)] = 1.0;
        let a = env.expert_action(obs);
        targets[(i, 0)] = a[0];
        targets[(i, 1)] = a[1];
    }
    let gram = features.transpose() * &features + DMatrix::<f64>::identity(h + 1, h + 1) * (RIDGE * FIT_SAMPLES as f64);
    let rhs = features.transpose() * &targets;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::FitFailed("normal equations are not positive definite".into()))?;
    let coef = chol.solve(&rhs);

    let mut head_w = Vec::with_capacity(ACTION_DIM * h);
    for a in 0..ACTION_DIM {
        head_w.extend((0..h).map(|j| coef[(j, a)]));
    }
    let head_b: Vec<f64> = (0..ACTION_DIM).map(|a| coef[(h, a)]).collect();
    let head = Layer::new(
        Matrix::new(ACTION_DIM, h, head_w)?,
        Vector::new(head_b)?,
        Activation::Identity,
        Tag::ActionHead,
    )?;

    let pred = &features * &coef;
    let resid = (pred - targets).norm_squared() / (FIT_SAMPLES * ACTION_DIM) as f64;
    let residual_rms = resid.sqrt();
    let residual_bound = 0.05 * cfg.gain * cfg.workspace_radius;
    if !residual_rms.is_finite() || residual_rms > residual_bound {
        return Err(Error::FitFailed(format!(
            "residual RMS {residual_rms:.4} exceeds {residual_bound:.4}"
        )));
    }
    let model = PolicyModel::new(OBS_DIM, ACTION_DIM, vec![vision, backbone, head])?;
    Ok(ReferenceFit {
        model,
        residual_rms,
        residual_bound,
    })
}

pub fn reference_policy(cfg: &EnvConfig, seed: u64) -> Result<PolicyModel> {
    fit_reference_policy(cfg, seed).map(|f| f.model)
}

/// Observations from `n_traj` full-precision episodes (`horizon` each).
pub fn make_calibration(env: &Environment, policy: &dyn Policy, n_traj: usize, seed: u64) -> Result<CalibrationSet> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("need at least one calibration trajectory".into()));
    }
    env.check_policy(policy)?;
    let episodes = (0..n_traj)
        .into_par_iter()
        .map(|i| env.run_episode(policy, env.initial_state(seed, Stream::Calib, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let observations = episodes
        .into_iter()
        .flat_map(|(obs, _)| obs)
        .map(Vector::new)
        .collect::<Result<Vec<_>>>()?;
    CalibrationSet::new(observations, n_traj, seed)
}

/// How the deviation between the two policies is measured during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeviationMode {
    /// The quantized policy drives; the full-precision action is recomputed
    /// on the same state.
    #[default]
    LockStep,
    /// Each policy drives its own copy of the environment from the same
    /// start; actions are compared across the two trajectories.
    Divergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub episodes: usize,
    /// Mean `‖Ã_t − A_t‖` per step.
    pub step_deviation: Vec<f64>,
    /// Running sum of `step_deviation`.
    pub cumulative_curve: Vec<f64>,
    /// Final cumulative deviation of each episode.
    pub episode_final_deviation: Vec<f64>,
    pub final_distance_mean: f64,
    pub success_rate: f64,
    pub baseline_success_rate: f64,
    pub teacher_forced_mse: Option<f64>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    episodes: usize,
    success_rate: f64,
    teacher_forced_mse: Option<f64>,
    cumulative_curve: &'a [f64],
    final_deviation_mean: f64,
}

impl RolloutReport {
    pub fn final_deviation_mean(&self) -> f64 {
        self.cumulative_curve.last().copied().unwrap_or(0.0)
    }

    pub fn with_teacher_forced_mse(mut self, mse: f64) -> Self {
        self.teacher_forced_mse = Some(mse);
        self
    }

    pub fn to_json_string(&self) -> String {
        let file = ReportFile {
            episodes: self.episodes,
            success_rate: self.success_rate,
            teacher_forced_mse: self.teacher_forced_mse,
            cumulative_curve: &self.cumulative_curve,
            final_deviation_mean: self.final_deviation_mean(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("report serialization is infallible");
        s.push('\n');
        s
    }

    /// `t,deviation,cumulative` rows for `t = 1..=T`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("t,deviation,cumulative\n");
        for (t, (d, c)) in self.step_deviation.iter().zip(&self.cumulative_curve).enumerate() {
            writeln!(s, "{},{:.16e},{:.16e}", t + 1, d, c).expect("string write");
        }
        s
    }
}

struct EpisodeResult {
    deviation: Vec<f64>,
    final_distance: f64,
    success: bool,
    baseline_success: bool,
}

fn run_pair(
    env: &Environment,
    fp: &dyn Policy,
    q: &dyn Policy,
    start: EnvState,
    mode: DeviationMode,
) -> Result<EpisodeResult> {
    let horizon = env.cfg.horizon;
    let mut deviation = Vec::with_capacity(horizon);
    let mut s_q = start;
    let mut s_fp = start;
    for _ in 0..horizon {
        let obs_q = env.observe(&s_q);
        let a_q = q.act(&obs_q)?;
        let a_fp = match mode {
            DeviationMode::LockStep => fp.act(&obs_q)?,
            DeviationMode::Divergence => fp.act(&env.observe(&s_fp))?,
        };
        deviation.push(tensor::sq_dist(&a_q, &a_fp).sqrt());
        s_q = env.step(&s_q, &a_q)?;
        if mode == DeviationMode::Divergence {
            s_fp = env.step(&s_fp, &a_fp)?;
        }
    }
    if mode == DeviationMode::LockStep {
        s_fp = env.run_episode(fp, start)?.1;
    }
    let radius = env.cfg.success_radius;
    Ok(EpisodeResult {
        deviation,
        final_distance: s_q.distance_to_goal(),
        success: s_q.distance_to_goal() <= radius,
        baseline_success: s_fp.distance_to_goal() <= radius,
    })
}

/// Rolls both policies from identical initial states and aggregates
/// per-step action deviations over `episodes`.
pub fn rollout_pair(
    env: &Environment,
    fp: &dyn Policy,
    q: &dyn Policy,
    episodes: usize,
    seed: u64,
    mode: DeviationMode,
) -> Result<RolloutReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    env.check_policy(fp)?;
    env.check_policy(q)?;
    let results = (0..episodes)
        .into_par_iter()
        .map(|ep| run_pair(env, fp, q, env.initial_state(seed, Stream::Rollout, ep as u64), mode))
        .collect::<Result<Vec<_>>>()?;

    let horizon = env.cfg.horizon;
    let n = episodes as f64;
    let mut step_deviation = vec![0.0; horizon];
    for r in &results {
        for (acc, d) in step_deviation.iter_mut().zip(&r.deviation) {
            *acc += d;
        }
    }
    step_deviation.iter_mut().for_each(|d| *d /= n);
    let cumulative_curve = step_deviation
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();
    Ok(RolloutReport {
        episodes,
        step_deviation,
        cumulative_curve,
        episode_final_deviation: results.iter().map(|r| r.deviation.iter().sum()).collect(),
        final_distance_mean: results.iter().map(|r| r.final_distance).sum::<f64>() / n,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        baseline_success_rate: results.iter().filter(|r| r.baseline_success).count() as f64 / n,
        teacher_forced_mse: None,
    })
}

/// Mean `‖A_q(x) − A_fp(x)‖²` over the calibration observations.
pub fn teacher_forced_mse(fp: &dyn Policy, q: &dyn Policy, calib: &CalibrationSet) -> Result<f64> {
    let total = calib
        .observations()
        .par_iter()
        .map(|o| Ok(tensor::sq_dist(&q.act(o.as_slice())?, &fp.act(o.as_slice())?)))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(total / calib.len() as f64)
}
