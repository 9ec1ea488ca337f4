//! Reward training of the denoiser with the eager policy gradient.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{
    load_checkpoint, log_prob_of_batch, predict, save_checkpoint, transition_log_prob_batch, Checkpoint,
    CheckpointMeta, Condition, Denoiser, Params, CHECKPOINT_FORMAT,
};
use crate::diffusion::{sample_field, sample_trajectories, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{reward, Environment, GraphState, RewardMode, Scored};
use crate::seeds::{self, Stream};

/// Consecutive non-finite gradients tolerated before training aborts.
pub const MAX_SKIPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Scores `G^0` directly from every sampled `G^t`.
    #[default]
    Eager,
    /// Scores each reverse transition `G^t -> G^{t-1}`.
    PerStep,
}

/// How rewards are centered before weighting the score function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advantage {
    /// `r - b` with `b` a running mean (or 0 when `baseline` is off).
    #[default]
    Ema,
    /// `(r - mean) / std` within each batch of M trajectories.
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Trajectories per step, M.
    pub trajectories: usize,
    /// Timesteps scored per trajectory, |T_m|.
    pub timestep_samples: usize,
    /// Training steps, L.
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Subtract a running mean of the reward.
    pub baseline: bool,
    pub baseline_decay: f64,
    pub advantage: Advantage,
    pub estimator: Estimator,
    pub reward_mode: RewardMode,
    /// Largest number of graphs per denoiser evaluation in the gradient.
    pub batch_size: usize,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trajectories: 8,
            timestep_samples: 4,
            steps: 100,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            baseline: true,
            baseline_decay: 0.9,
            advantage: Advantage::Ema,
            estimator: Estimator::Eager,
            reward_mode: RewardMode::Surrogate,
            batch_size: 32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, steps_t: usize) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::setting("train.trajectories", "must be at least 1"));
        }
        if steps_t > 0 && (self.timestep_samples == 0 || self.timestep_samples > steps_t) {
            return Err(Error::setting(
                "train.timestep_samples",
                format!("must lie in 1..={steps_t}, got {}", self.timestep_samples),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::setting("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::setting("train.baseline_decay", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::setting("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// A sampled chain `G^T, ..., G^0` (a single graph for one-shot policies)
/// and the reward of its last graph.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub chain: Vec<GraphState>,
    pub reward: f64,
}

impl Rollout {
    pub fn terminal(&self) -> &GraphState {
        self.chain.last().expect("chains are never empty")
    }

    fn steps(&self) -> usize {
        self.chain.len() - 1
    }

    /// `G^t` for `t` in `0..=T`.
    fn at(&self, t: usize) -> &GraphState {
        &self.chain[self.steps() - t]
    }
}

fn zero_grads(params: &Params) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
        .collect()
}

fn accumulate(params: &Params, objective: &Tensor, acc: &mut [Tensor]) -> Result<()> {
    let store = objective.backward()?;
    for ((_, var), slot) in params.iter().zip(acc.iter_mut()) {
        if let Some(g) = store.get(var.as_tensor()) {
            *slot = (&*slot + g)?;
        }
    }
    Ok(())
}

struct Term<'a> {
    target: &'a GraphState,
    graph: &'a GraphState,
    prev: &'a GraphState,
    t: usize,
    weight: f64,
}

fn weighted_terms<'a>(rollouts: &'a [Rollout], timesteps: &[Vec<usize>], baseline: f64) -> Result<Vec<Term<'a>>> {
    if rollouts.is_empty() {
        return Err(Error::setting("rollouts", "empty trajectory set"));
    }
    if timesteps.len() != rollouts.len() {
        return Err(Error::setting("timesteps", "one timestep set per trajectory"));
    }
    let m = rollouts.len() as f64;
    let mut terms = Vec::new();
    for (r, ts) in rollouts.iter().zip(timesteps) {
        let adv = r.reward - baseline;
        if r.steps() == 0 {
            let g = r.terminal();
            terms.push(Term {
                target: g,
                graph: g,
                prev: g,
                t: 0,
                weight: adv / m,
            });
            continue;
        }
        if ts.is_empty() || ts.iter().any(|&t| t == 0 || t > r.steps()) {
            return Err(Error::setting("timesteps", "must be a nonempty subset of 1..=T"));
        }
        let scale = r.steps() as f64 / ts.len() as f64;
        for &t in ts {
            terms.push(Term {
                target: r.terminal(),
                graph: r.at(t),
                prev: r.at(t - 1),
                t,
                weight: adv * scale / m,
            });
        }
    }
    Ok(terms)
}

fn estimate<D, F>(den: &D, terms: &[Term], batch_size: usize, mut log_prob: F) -> Result<Vec<Tensor>>
where
    D: Denoiser + ?Sized,
    F: FnMut(&[Term]) -> Result<Tensor>,
{
    let mut acc = zero_grads(den.params())?;
    for chunk in terms.chunks(batch_size) {
        if chunk.iter().all(|t| t.weight == 0.0) {
            continue;
        }
        let w = Tensor::from_vec(chunk.iter().map(|t| t.weight).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
        let objective = (log_prob(chunk)? * w)?.sum_all()?;
        accumulate(den.params(), &objective, &mut acc)?;
    }
    Ok(acc)
}

/// `(1/M) sum_m (T/|T_m|) sum_{t in T_m} (r_m - b) grad log q(G^0_m | G^t_m)`,
/// one tensor per parameter. One-shot rollouts contribute
/// `(r_m - b) grad log q(G^0_m)`.
pub fn eager_gradient<D: Denoiser + ?Sized>(
    den: &D,
    rollouts: &[Rollout],
    timesteps: &[Vec<usize>],
    baseline: f64,
    cond: &Condition,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let terms = weighted_terms(rollouts, timesteps, baseline)?;
    estimate(den, &terms, batch_size.max(1), |chunk| {
        let targets: Vec<GraphState> = chunk.iter().map(|t| t.target.clone()).collect();
        let graphs: Vec<GraphState> = chunk.iter().map(|t| t.graph.clone()).collect();
        let ts: Vec<usize> = chunk.iter().map(|t| t.t).collect();
        log_prob_of_batch(den, &targets, &graphs, &ts, cond)
    })
}

/// Same weighting as [`eager_gradient`] but scoring the reverse
/// transitions `log q(G^{t-1} | G^t)`.
pub fn per_step_gradient<D: Denoiser + ?Sized>(
    den: &D,
    rollouts: &[Rollout],
    timesteps: &[Vec<usize>],
    baseline: f64,
    cond: &Condition,
    schedule: &NoiseSchedule,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    if rollouts.iter().any(|r| r.steps() == 0) {
        return Err(Error::setting("estimator", "per-step gradients need diffusion chains"));
    }
    let terms = weighted_terms(rollouts, timesteps, baseline)?;
    estimate(den, &terms, batch_size.max(1), |chunk| {
        let prev: Vec<GraphState> = chunk.iter().map(|t| t.prev.clone()).collect();
        let graphs: Vec<GraphState> = chunk.iter().map(|t| t.graph.clone()).collect();
        let ts: Vec<usize> = chunk.iter().map(|t| t.t).collect();
        transition_log_prob_batch(den, &prev, &graphs, &ts, cond, schedule)
    })
}

fn all_finite(grads: &[Tensor]) -> Result<bool> {
    for g in grads {
        if g.flatten_all()?.to_vec1::<f64>()?.iter().any(|x| !x.is_finite()) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// First-order ascent on the parameters.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &Params) -> Result<Self> {
        Ok(Optimizer {
            kind,
            lr,
            steps: 0,
            m: zero_grads(params)?,
            v: zero_grads(params)?,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Moves every parameter along `grads` (ascent).
    pub fn ascend(&mut self, params: &Params, grads: &[Tensor]) -> Result<()> {
        self.steps += 1;
        for (i, ((_, var), g)) in params.iter().zip(grads).enumerate() {
            let delta = match self.kind {
                OptimizerKind::Sgd => (g * self.lr)?,
                OptimizerKind::Adam => {
                    self.m[i] = ((&self.m[i] * BETA1)? + (g * (1.0 - BETA1))?)?;
                    self.v[i] = ((&self.v[i] * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
                    let mhat = (&self.m[i] / (1.0 - BETA1.powi(self.steps as i32)))?;
                    let vhat = (&self.v[i] / (1.0 - BETA2.powi(self.steps as i32)))?;
                    ((mhat / (vhat.sqrt()? + ADAM_EPS)?)? * self.lr)?
                }
            };
            var.set(&(var.as_tensor().detach() + delta)?)?;
        }
        Ok(())
    }

    fn state(&self, params: &Params) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    fn restore(&mut self, params: &Params, state: &HashMap<String, Tensor>, steps: usize) -> Result<()> {
        for (i, (name, _)) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Graph(format!("optimizer state lacks {key}")))?;
                *slot = t.clone();
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// What a training step samples from.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// Full reverse diffusion chains.
    Diffusion(&'a NoiseSchedule),
    /// One draw from the denoiser's prediction at `t = 0`.
    OneShot,
}

/// Per-step record written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub max_reward: f64,
    /// Fraction of samples raising the association, location, collision
    /// and range indicators.
    pub penalty_rates: [f64; 4],
    pub mean_utility: f64,
    pub feasible_rate: f64,
    pub skipped: bool,
    /// Seconds since the trainer was created; not reproducible.
    pub wall_time: f64,
}

impl StepMetrics {
    pub fn from_scores(step: usize, scores: &[Scored], skipped: bool, wall_time: f64) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = |f: &dyn Fn(&Scored) -> f64| scores.iter().map(f).sum::<f64>() / n;
        StepMetrics {
            step,
            mean_reward: mean(&|s| s.reward),
            max_reward: scores.iter().map(|s| s.reward).fold(f64::NEG_INFINITY, f64::max),
            penalty_rates: [
                mean(&|s| f64::from(s.audit.xi_a)),
                mean(&|s| f64::from(s.audit.xi_m)),
                mean(&|s| f64::from(s.audit.xi_c)),
                mean(&|s| f64::from(s.audit.xi_r)),
            ],
            mean_utility: mean(&|s| s.utility),
            feasible_rate: mean(&|s| f64::from(u8::from(s.feasible()))),
            skipped,
            wall_time,
        }
    }

    /// The record with the wall-clock field cleared, for reproducibility
    /// comparisons.
    pub fn reproducible(&self) -> Self {
        StepMetrics {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// sha256 of the compact JSON form of a configuration value.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Owns the single-writer training loop for one denoiser.
pub struct Trainer<'a, D: Denoiser + ?Sized> {
    env: &'a Environment,
    den: &'a D,
    policy: Policy<'a>,
    cfg: TrainConfig,
    seed: u64,
    snapshot: serde_json::Value,
    optimizer: Optimizer,
    baseline: Option<f64>,
    step: usize,
    skips_in_row: usize,
    started: Instant,
}

impl<'a, D: Denoiser + ?Sized> Trainer<'a, D> {
    /// `snapshot` is the configuration recorded in checkpoints; resuming
    /// requires the same snapshot.
    pub fn new(
        env: &'a Environment,
        den: &'a D,
        policy: Policy<'a>,
        cfg: TrainConfig,
        seed: u64,
        snapshot: serde_json::Value,
    ) -> Result<Self> {
        let steps_t = match policy {
            Policy::Diffusion(s) => s.steps(),
            Policy::OneShot => 0,
        };
        cfg.validate(steps_t)?;
        if cfg.estimator == Estimator::PerStep && steps_t == 0 {
            return Err(Error::setting("train.estimator", "per-step needs a diffusion policy"));
        }
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, den.params())?;
        Ok(Trainer {
            env,
            den,
            policy,
            cfg,
            seed,
            snapshot,
            optimizer,
            baseline: None,
            step: 0,
            skips_in_row: 0,
            started: Instant::now(),
        })
    }

    /// Restores parameters, optimizer moments, baseline and step counter
    /// from a checkpoint written by a trainer with the same snapshot.
    pub fn resume(mut self, dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let bad = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        if ckpt.meta.config_hash != config_hash(&self.snapshot) {
            return Err(bad("configuration differs from the checkpoint".into()));
        }
        if ckpt.meta.seed != self.seed {
            return Err(bad(format!("checkpoint seed {} differs from {}", ckpt.meta.seed, self.seed)));
        }
        self.den.params().assign(&ckpt.params)?;
        self.optimizer
            .restore(self.den.params(), &ckpt.optimizer, ckpt.meta.optimizer_steps)?;
        self.baseline = ckpt.meta.baseline;
        self.step = ckpt.meta.step;
        Ok(self)
    }

    pub fn completed_steps(&self) -> usize {
        self.step
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn condition(&self) -> Condition {
        Condition::new(self.env.gu_cells())
    }

    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(
            dir,
            &Checkpoint {
                meta: CheckpointMeta {
                    format: CHECKPOINT_FORMAT,
                    step: self.step,
                    seed: self.seed,
                    config_hash: config_hash(&self.snapshot),
                    config: self.snapshot.clone(),
                    baseline: self.baseline,
                    optimizer_steps: self.optimizer.steps(),
                },
                params: self.den.params().tensors(),
                optimizer: self.optimizer.state(self.den.params()),
            },
        )
    }

    fn rollouts(&self, cond: &Condition) -> Result<(Vec<GraphState>, Vec<Vec<GraphState>>, Vec<Vec<usize>>)> {
        let m = self.cfg.trajectories;
        let k = self.env.cfg.num_aebs;
        let n = self.env.gus.len();
        let mut rngs: Vec<_> = (0..m)
            .map(|i| seeds::rng(self.seed, Stream::Sample, self.step as u64, i as u64))
            .collect();
        let (chains, steps_t) = match self.policy {
            Policy::Diffusion(schedule) => (
                sample_trajectories(self.den, schedule, k, cond, &mut rngs)?,
                schedule.steps(),
            ),
            Policy::OneShot => {
                let blank = GraphState::new(vec![0; k], vec![0; k * n], n, 0)?;
                let pred = predict(self.den, &blank, 0, cond)?;
                let chains = rngs
                    .iter_mut()
                    .map(|rng| Ok(vec![sample_field(&pred, n, rng)?]))
                    .collect::<Result<Vec<_>>>()?;
                (chains, 0)
            }
        };
        let timesteps = rngs
            .iter_mut()
            .map(|rng| {
                if steps_t == 0 {
                    return Vec::new();
                }
                let mut ts: Vec<usize> = index::sample(rng, steps_t, self.cfg.timestep_samples)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                ts.sort_unstable();
                ts
            })
            .collect();
        let terminals = chains.iter().map(|c| c.last().unwrap().clone()).collect();
        Ok((terminals, chains, timesteps))
    }

    /// One training step: sample, score, estimate, ascend.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let cond = self.condition();
        let (terminals, chains, timesteps) = self.rollouts(&cond)?;
        let channel_seed = seeds::derive(self.seed, Stream::Channel, self.step as u64, 0);
        let scores: Vec<Scored> = terminals
            .par_iter()
            .map(|g| reward(g, self.env, channel_seed, self.cfg.reward_mode))
            .collect::<Result<_>>()?;
        let mean = scores.iter().map(|s| s.reward).sum::<f64>() / scores.len() as f64;
        let b = if self.cfg.baseline {
            self.baseline.unwrap_or(mean)
        } else {
            0.0
        };
        let (b, scale) = match self.cfg.advantage {
            Advantage::Ema => (b, 1.0),
            Advantage::Standardized => {
                let var = scores.iter().map(|s| (s.reward - mean).powi(2)).sum::<f64>() / scores.len() as f64;
                (mean, 1.0 / (var.sqrt() + 1e-8))
            }
        };
        let rollouts: Vec<Rollout> = chains
            .into_iter()
            .zip(&scores)
            .map(|(chain, s)| Rollout {
                chain,
                reward: b + (s.reward - b) * scale,
            })
            .collect();
        let grads = match (self.cfg.estimator, self.policy) {
            (Estimator::PerStep, Policy::Diffusion(schedule)) => per_step_gradient(
                self.den,
                &rollouts,
                &timesteps,
                b,
                &cond,
                schedule,
                self.cfg.batch_size,
            )?,
            _ => eager_gradient(self.den, &rollouts, &timesteps, b, &cond, self.cfg.batch_size)?,
        };
        let skipped = !all_finite(&grads)?;
        if skipped {
            self.skips_in_row += 1;
            log::warn!("step {}: non-finite gradient, update skipped", self.step);
            if self.skips_in_row >= MAX_SKIPS {
                return Err(Error::Diverged {
                    step: self.step,
                    skipped: self.skips_in_row,
                    detail: format!("mean reward {mean:.6}, baseline {b:.6}"),
                });
            }
        } else {
            self.skips_in_row = 0;
            self.optimizer.ascend(self.den.params(), &grads)?;
        }
        self.baseline = Some(match self.baseline {
            Some(prev) => self.cfg.baseline_decay * prev + (1.0 - self.cfg.baseline_decay) * mean,
            None => mean,
        });
        let metrics = StepMetrics::from_scores(self.step, &scores, skipped, self.started.elapsed().as_secs_f64());
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `cfg.steps` steps are complete, appending one JSON line
    /// per step to `metrics` and checkpointing into `ckpt_dir`.
    pub fn run(&mut self, mut metrics: Option<&mut dyn Write>, ckpt_dir: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let m = self.step_once()?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io("metrics", e))?;
            }
            log::info!(
                "step {} mean reward {:.4} max {:.4} feasible {:.2}",
                m.step,
                m.mean_reward,
                m.max_reward,
                m.feasible_rate
            );
            out.push(m);
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.checkpoint(dir)?;
        }
        Ok(out)
    }
}
