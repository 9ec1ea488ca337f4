//! The reverse-process network: a noisy graph and its step go in, per-node
//! and per-edge distributions over the clean graph come out.

mod checkpoint;
mod table;
mod transformer;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use table::TableDenoiser;
pub use transformer::{DenoiserConfig, GraphTransformer, Init};

use crate::diffusion::{CategoricalField, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::GraphState;

/// Log-probabilities are clamped here so that gradients stay finite.
pub const LOG_PROB_FLOOR: f64 = -1e9;

/// Side information the denoiser is conditioned on besides the graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    /// Grid cell of every GU.
    pub gu_cells: Vec<usize>,
    /// Utility of the current resource allocation (0 when there is none).
    pub utility: f64,
    /// Fraction of the power budget each AeBS currently uses (empty when
    /// there is no allocation yet, read as zeros).
    pub power: Vec<f64>,
}

impl Condition {
    pub fn new(gu_cells: Vec<usize>) -> Self {
        Condition {
            gu_cells,
            ..Condition::default()
        }
    }
}

/// Log-probabilities of a batch: nodes `[B, K, S]`, edges `[B, K, N, 2]`
/// (absent when there are no GUs).
pub struct LogProbs {
    pub nodes: Tensor,
    pub edges: Option<Tensor>,
}

pub trait Denoiser {
    /// Differentiable log-probabilities of the clean graph for every graph
    /// in the batch; `ts[i]` is the step of `graphs[i]`.
    fn log_probs(&self, graphs: &[GraphState], ts: &[usize], cond: &Condition) -> Result<LogProbs>;

    fn params(&self) -> &Params;

    /// Size of the node alphabet.
    fn cells(&self) -> usize;
}

/// Named trainable tensors in a fixed order.
#[derive(Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    /// Registers a variable and returns a handle that tracks it.
    pub fn insert(&mut self, name: impl Into<String>, init: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&init)?;
        let handle = var.as_tensor().clone();
        self.entries.push((name.into(), var));
        Ok(handle)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter with the tensor of the same name.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::Graph(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(DType::F64)?)?;
        }
        Ok(())
    }

    /// All parameters flattened in registration order.
    pub fn flat(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.count());
        for (_, v) in &self.entries {
            out.extend(v.as_tensor().flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

pub(crate) fn index_tensor(values: impl IntoIterator<Item = usize>, shape: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = values.into_iter().map(|x| x as u32).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub(crate) fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let y = x.broadcast_sub(&m)?;
    let lse = y.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(y.broadcast_sub(&lse)?)
}

fn check_batch(graphs: &[GraphState], ts: &[usize], cells: usize) -> Result<(usize, usize)> {
    let first = graphs.first().ok_or_else(|| Error::Graph("empty batch".into()))?;
    if ts.len() != graphs.len() {
        return Err(Error::Graph("one step per graph required".into()));
    }
    let shape = (first.num_aebs(), first.num_gus);
    for g in graphs {
        if (g.num_aebs(), g.num_gus) != shape {
            return Err(Error::Graph("graphs in a batch must share K and N".into()));
        }
        g.validate(cells)?;
    }
    Ok(shape)
}

/// Distributions over the clean graph for every graph in the batch.
pub fn predict_batch<D: Denoiser + ?Sized>(
    den: &D,
    graphs: &[GraphState],
    ts: &[usize],
    cond: &Condition,
) -> Result<Vec<CategoricalField>> {
    let (k, n) = check_batch(graphs, ts, den.cells())?;
    let lp = den.log_probs(graphs, ts, cond)?;
    let nodes = lp.nodes.detach().exp()?.to_vec3::<f64>()?;
    let edges = match lp.edges {
        Some(e) => e.detach().exp()?.reshape((graphs.len(), k * n, 2))?.to_vec3::<f64>()?,
        None => vec![Vec::new(); graphs.len()],
    };
    Ok(nodes
        .into_iter()
        .zip(edges)
        .map(|(nodes, edges)| CategoricalField {
            nodes,
            edges: edges.into_iter().map(|e| [e[0], e[1]]).collect(),
        })
        .collect())
}

pub fn predict<D: Denoiser + ?Sized>(den: &D, graph: &GraphState, t: usize, cond: &Condition) -> Result<CategoricalField> {
    Ok(predict_batch(den, std::slice::from_ref(graph), &[t], cond)?.remove(0))
}

/// `log q(target | graphs[i], ts[i])` summed over nodes and edges, as a
/// differentiable `[B]` tensor.
pub fn log_prob_of_batch<D: Denoiser + ?Sized>(
    den: &D,
    targets: &[GraphState],
    graphs: &[GraphState],
    ts: &[usize],
    cond: &Condition,
) -> Result<Tensor> {
    let (k, n) = check_batch(graphs, ts, den.cells())?;
    check_batch(targets, ts, den.cells())?;
    if targets[0].num_aebs() != k || targets[0].num_gus != n {
        return Err(Error::Graph("targets and graphs differ in shape".into()));
    }
    let b = graphs.len();
    let lp = den.log_probs(graphs, ts, cond)?;
    let node_idx = index_tensor(targets.iter().flat_map(|g| g.nodes.iter().copied()), &[b, k, 1])?;
    let mut total = lp.nodes.gather(&node_idx, 2)?.maximum(LOG_PROB_FLOOR)?.sum((1, 2))?;
    if let Some(e) = lp.edges {
        let edge_idx = index_tensor(
            targets.iter().flat_map(|g| g.edges.iter().map(|&x| x as usize)),
            &[b, k, n, 1],
        )?;
        total = (total + e.gather(&edge_idx, 3)?.maximum(LOG_PROB_FLOOR)?.sum((1, 2, 3))?)?;
    }
    Ok(total)
}

pub fn log_prob_of<D: Denoiser + ?Sized>(
    den: &D,
    target: &GraphState,
    graph: &GraphState,
    t: usize,
    cond: &Condition,
) -> Result<f64> {
    let lp = log_prob_of_batch(den, std::slice::from_ref(target), std::slice::from_ref(graph), &[t], cond)?;
    Ok(lp.to_vec1::<f64>()?[0])
}

/// Coefficients `(a, b, c)` with `p(prev) = a q(prev) + b q(cur) + c`, the
/// reverse-step probability of one variable as a function of the
/// predicted clean-state probabilities.
fn step_coefficients(prev: usize, cur: usize, t: usize, schedule: &NoiseSchedule, prior: &[f64]) -> [f64; 3] {
    let a_t = schedule.alpha(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let z_other = (1.0 - ab) * prior[cur];
    let z_same = ab + z_other;
    let step = a_t * f64::from(u8::from(prev == cur)) + (1.0 - a_t) * prior[cur];
    let z_prev = if prev == cur { z_same } else { z_other };
    let spread = step * (1.0 - ab_prev) * prior[prev];
    [step * ab_prev / z_prev, spread * (1.0 / z_same - 1.0 / z_other), spread / z_other]
}

/// `log q(prev | graphs[i])` of the reverse step itself (the mixture of
/// posteriors under the predicted clean graph), as a differentiable `[B]`
/// tensor. Used by the per-step policy-gradient estimator.
pub fn transition_log_prob_batch<D: Denoiser + ?Sized>(
    den: &D,
    prev: &[GraphState],
    graphs: &[GraphState],
    ts: &[usize],
    cond: &Condition,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (k, n) = check_batch(graphs, ts, den.cells())?;
    check_batch(prev, ts, den.cells())?;
    if ts.iter().any(|&t| t == 0 || t > schedule.steps()) {
        return Err(Error::setting("t", "reverse steps run over 1..=T"));
    }
    let b = graphs.len();
    let lp = den.log_probs(graphs, ts, cond)?;

    let term = |logp: &Tensor, prev_states: Vec<usize>, cur_states: Vec<usize>, shape: &[usize], prior: &[f64]| -> Result<Tensor> {
        let per = shape.iter().skip(1).product::<usize>();
        let mut coef = [Vec::new(), Vec::new(), Vec::new()];
        for (i, (&p, &c)) in prev_states.iter().zip(&cur_states).enumerate() {
            let abc = step_coefficients(p, c, ts[i / per], schedule, prior);
            for j in 0..3 {
                coef[j].push(abc[j]);
            }
        }
        let mut idx_shape = shape.to_vec();
        idx_shape.push(1);
        let dim = shape.len();
        let q_prev = logp.gather(&index_tensor(prev_states, &idx_shape)?, dim)?.exp()?;
        let q_cur = logp.gather(&index_tensor(cur_states, &idx_shape)?, dim)?.exp()?;
        let as_tensor = |v: Vec<f64>| Tensor::from_vec(v, idx_shape.as_slice(), &Device::Cpu);
        let [a, bb, c] = coef;
        let p = ((q_prev * as_tensor(a)?)? + (q_cur * as_tensor(bb)?)?)?.add(&as_tensor(c)?)?;
        let lp = p.log()?.maximum(LOG_PROB_FLOOR)?;
        let dims: Vec<usize> = (1..=dim).collect();
        Ok(lp.sum(dims)?)
    };

    let mut total = term(
        &lp.nodes,
        prev.iter().flat_map(|g| g.nodes.iter().copied()).collect(),
        graphs.iter().flat_map(|g| g.nodes.iter().copied()).collect(),
        &[b, k],
        &schedule.node_prior,
    )?;
    if let Some(e) = &lp.edges {
        total = (total
            + term(
                e,
                prev.iter().flat_map(|g| g.edges.iter().map(|&x| x as usize)).collect(),
                graphs.iter().flat_map(|g| g.edges.iter().map(|&x| x as usize)).collect(),
                &[b, k, n],
                &schedule.edge_prior,
            )?)?;
    }
    Ok(total)
}
