//! Discrete diffusion over deployment graphs.
//!
//! Every node and edge is noised independently with a transition matrix of
//! the form `Q_t = a_t I + (1 - a_t) 1 m^T`, where `m` is the stationary law
//! of that variable. Products of such matrices keep the form, so the
//! cumulative matrix after `t` steps is `abar_t I + (1 - abar_t) 1 m^T`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_batch, Condition, Denoiser};
use crate::error::{Error, Result};
use crate::graph::GraphState;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Stationary law of the noising process.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stationary {
    /// Uniform over node cells and over edge states.
    #[default]
    Uniform,
    /// Uniform over cells, edges on with probability 1/K (one link per GU
    /// on average).
    Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    /// `abar_0 ..= abar_T`.
    alpha_bar: Vec<f64>,
    pub node_prior: Vec<f64>,
    pub edge_prior: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine cumulative schedule over `steps` steps.
    pub fn cosine(steps: usize, cells: usize, num_aebs: usize, stationary: Stationary) -> Result<Self> {
        if steps == 0 {
            return Err(Error::setting("steps", "need at least one diffusion step"));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| (f(t as f64) / f0).clamp(0.0, 1.0)).collect();
        alpha_bar[0] = 1.0;
        // cos(pi/2) is not exactly zero in floating point
        alpha_bar[steps] = alpha_bar[steps].min(1e-12);
        let edge_on = match stationary {
            Stationary::Uniform => 0.5,
            Stationary::Marginal => 1.0 / num_aebs.max(1) as f64,
        };
        Self::custom(alpha_bar, vec![1.0 / cells as f64; cells], vec![1.0 - edge_on, edge_on])
    }

    /// Schedule from explicit cumulative keep-probabilities `abar_0..=abar_T`.
    pub fn custom(alpha_bar: Vec<f64>, node_prior: Vec<f64>, edge_prior: Vec<f64>) -> Result<Self> {
        if alpha_bar.first() != Some(&1.0) {
            return Err(Error::setting("alpha_bar", "must start at 1"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] <= w[0] && w[1] >= 0.0)) {
            return Err(Error::setting("alpha_bar", "must be nonincreasing in [0, 1]"));
        }
        for (name, prior) in [("node_prior", &node_prior), ("edge_prior", &edge_prior)] {
            check_distribution(prior).map_err(|e| Error::setting(name, e))?;
            if prior.iter().any(|&p| p <= 0.0) {
                return Err(Error::setting(name, "every state needs positive stationary mass"));
            }
        }
        if edge_prior.len() != 2 {
            return Err(Error::setting("edge_prior", "edges have two states"));
        }
        Ok(NoiseSchedule {
            steps: alpha_bar.len() - 1,
            alpha_bar,
            node_prior,
            edge_prior,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.node_prior.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// One-step keep-probability `a_t = abar_t / abar_{t-1}`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "step {t} outside 1..={}", self.steps);
        let prev = self.alpha_bar[t - 1];
        if prev > 0.0 {
            self.alpha_bar[t] / prev
        } else {
            0.0
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::setting("t", format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Dense `Q_t` for a variable with stationary law `prior`.
    pub fn transition_matrix(&self, t: usize, prior: &[f64]) -> Vec<Vec<f64>> {
        keep_matrix(self.alpha(t), prior)
    }

    /// Dense cumulative matrix after `t` steps.
    pub fn cumulative_matrix(&self, t: usize, prior: &[f64]) -> Vec<Vec<f64>> {
        keep_matrix(self.alpha_bar[t], prior)
    }

    /// Total-variation distance between the step-T marginal and the
    /// stationary law, worst case over starting states and variables.
    pub fn terminal_tv(&self) -> f64 {
        let worst = |prior: &[f64]| 1.0 - prior.iter().cloned().fold(f64::INFINITY, f64::min);
        self.alpha_bar[self.steps] * worst(&self.node_prior).max(worst(&self.edge_prior))
    }

    /// Writes `t,alpha_t,alpha_bar_t` rows (alpha_0 is reported as 1).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha_t,alpha_bar_t")?;
        for t in 0..=self.steps {
            let a = if t == 0 { 1.0 } else { self.alpha(t) };
            writeln!(out, "{t},{a},{}", self.alpha_bar[t])?;
        }
        Ok(())
    }
}

fn keep_matrix(keep: f64, prior: &[f64]) -> Vec<Vec<f64>> {
    (0..prior.len())
        .map(|i| {
            prior
                .iter()
                .enumerate()
                .map(|(j, &m)| (1.0 - keep) * m + if i == j { keep } else { 0.0 })
                .collect()
        })
        .collect()
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.is_empty() {
        return Err("empty distribution".into());
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err("negative or non-finite probability".into());
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(format!("probabilities sum to {s}"));
    }
    Ok(())
}

/// Posterior `q(x^{t-1} | x^0, x^t)` of one variable with stationary law
/// `prior`.
pub fn posterior(x0: usize, xt: usize, t: usize, schedule: &NoiseSchedule, prior: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t - 1);
    let mut out: Vec<f64> = (0..prior.len())
        .map(|s| {
            let step = a * f64::from(u8::from(s == xt)) + (1.0 - a) * prior[xt];
            let cum = ab * f64::from(u8::from(x0 == s)) + (1.0 - ab) * prior[s];
            step * cum
        })
        .collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Distribution(format!("zero posterior normalizer at t = {t}")));
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// `sum_{x0} pred(x0) q(x^{t-1} | x0, x^t)`, in O(S).
///
/// With `Z(x0) = abar_t [x0 = x^t] + (1 - abar_t) m(x^t)` the posterior
/// normalizer, the mixture is `Q_t[s, x^t] (abar_{t-1} w(s) + (1 -
/// abar_{t-1}) m(s) sum w)` for `w = pred / Z`.
pub fn posterior_mixture(
    pred: &[f64],
    xt: usize,
    t: usize,
    schedule: &NoiseSchedule,
    prior: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let z_other = (1.0 - ab) * prior[xt];
    let z_same = ab + z_other;
    let w: Vec<f64> = pred
        .iter()
        .enumerate()
        .map(|(s, &p)| if p == 0.0 { 0.0 } else { p / if s == xt { z_same } else { z_other } })
        .collect();
    let w_sum: f64 = w.iter().sum();
    let mut out: Vec<f64> = (0..prior.len())
        .map(|s| {
            let step = a * f64::from(u8::from(s == xt)) + (1.0 - a) * prior[xt];
            step * (ab_prev * w[s] + (1.0 - ab_prev) * prior[s] * w_sum)
        })
        .collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Distribution(format!("degenerate reverse step at t = {t}")));
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Per-node and per-edge categorical distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    /// K rows over the node alphabet.
    pub nodes: Vec<Vec<f64>>,
    /// K x N rows over {0, 1}, row-major.
    pub edges: Vec<[f64; 2]>,
}

impl CategoricalField {
    pub fn validate(&self) -> Result<()> {
        for row in &self.nodes {
            check_distribution(row).map_err(Error::Distribution)?;
        }
        for row in &self.edges {
            check_distribution(row).map_err(Error::Distribution)?;
        }
        Ok(())
    }
}

pub(crate) fn sample_from<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(p).map_err(|e| Error::Distribution(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Draws `G^t ~ q(G^t | G^0)` by resampling every variable from its
/// cumulative row.
pub fn forward_sample<R: Rng + ?Sized>(
    g0: &GraphState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GraphState> {
    schedule.check_step(t)?;
    g0.validate(schedule.cells())?;
    let keep = schedule.alpha_bar(t);
    let draw = |x: usize, prior: &[f64], rng: &mut R| -> Result<usize> {
        let row: Vec<f64> = prior
            .iter()
            .enumerate()
            .map(|(s, &m)| (1.0 - keep) * m + if s == x { keep } else { 0.0 })
            .collect();
        sample_from(&row, rng)
    };
    let mut nodes = Vec::with_capacity(g0.nodes.len());
    for &x in &g0.nodes {
        nodes.push(draw(x, &schedule.node_prior, rng)?);
    }
    let mut edges = Vec::with_capacity(g0.edges.len());
    for &e in &g0.edges {
        edges.push(draw(e as usize, &schedule.edge_prior, rng)? as u8);
    }
    GraphState::new(nodes, edges, g0.num_gus, t)
}

/// One reverse step `G^t -> G^{t-1}` from predicted `G^0` distributions.
pub fn denoise_step<R: Rng + ?Sized>(
    gt: &GraphState,
    predictions: &CategoricalField,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GraphState> {
    predictions.validate()?;
    if predictions.nodes.len() != gt.nodes.len() || predictions.edges.len() != gt.edges.len() {
        return Err(Error::Graph("predictions do not match the graph".into()));
    }
    let mut nodes = Vec::with_capacity(gt.nodes.len());
    for (&x, pred) in gt.nodes.iter().zip(&predictions.nodes) {
        let mix = posterior_mixture(pred, x, t, schedule, &schedule.node_prior)?;
        nodes.push(sample_from(&mix, rng)?);
    }
    let mut edges = Vec::with_capacity(gt.edges.len());
    for (&e, pred) in gt.edges.iter().zip(&predictions.edges) {
        let mix = posterior_mixture(pred, e as usize, t, schedule, &schedule.edge_prior)?;
        edges.push(sample_from(&mix, rng)? as u8);
    }
    GraphState::new(nodes, edges, gt.num_gus, t - 1)
}

/// A graph drawn from the stationary law, tagged with step T.
pub fn stationary_sample<R: Rng + ?Sized>(
    num_aebs: usize,
    num_gus: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GraphState> {
    let nodes = (0..num_aebs)
        .map(|_| sample_from(&schedule.node_prior, rng))
        .collect::<Result<Vec<_>>>()?;
    let edges = (0..num_aebs * num_gus)
        .map(|_| sample_from(&schedule.edge_prior, rng).map(|e| e as u8))
        .collect::<Result<Vec<_>>>()?;
    GraphState::new(nodes, edges, num_gus, schedule.steps())
}

/// Draws every variable directly from its predicted distribution.
pub fn sample_field<R: Rng + ?Sized>(
    pred: &CategoricalField,
    num_gus: usize,
    rng: &mut R,
) -> Result<GraphState> {
    pred.validate()?;
    let nodes = pred
        .nodes
        .iter()
        .map(|p| sample_from(p, rng))
        .collect::<Result<Vec<_>>>()?;
    let edges = pred
        .edges
        .iter()
        .map(|p| sample_from(p, rng).map(|e| e as u8))
        .collect::<Result<Vec<_>>>()?;
    GraphState::new(nodes, edges, num_gus, 0)
}

/// Samples `G^T, ..., G^0` with the denoiser.
pub fn sample_trajectory<D, R>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    num_aebs: usize,
    cond: &Condition,
    rng: &mut R,
) -> Result<Vec<GraphState>>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    let mut out = sample_trajectories(denoiser, schedule, num_aebs, cond, std::slice::from_mut(rng))?;
    Ok(out.remove(0))
}

/// Samples one trajectory per generator, evaluating the denoiser on all of
/// them at once at every step. Each trajectory only consumes its own
/// generator, so the result does not depend on how many run together.
pub fn sample_trajectories<D, R>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    num_aebs: usize,
    cond: &Condition,
    rngs: &mut [R],
) -> Result<Vec<Vec<GraphState>>>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    let num_gus = cond.gu_cells.len();
    let mut chains = Vec::with_capacity(rngs.len());
    for rng in rngs.iter_mut() {
        chains.push(vec![stationary_sample(num_aebs, num_gus, schedule, rng)?]);
    }
    for t in (1..=schedule.steps()).rev() {
        let current: Vec<GraphState> = chains.iter().map(|c| c.last().unwrap().clone()).collect();
        let preds = predict_batch(denoiser, &current, &vec![t; current.len()], cond)?;
        for ((chain, pred), rng) in chains.iter_mut().zip(&preds).zip(rngs.iter_mut()) {
            let next = denoise_step(chain.last().unwrap(), pred, t, schedule, rng)?;
            chain.push(next);
        }
    }
    Ok(chains)
}
