use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{index_tensor, log_softmax, Condition, Denoiser, LogProbs, Params};
use crate::error::{Error, Result};
use crate::graph::GraphState;

const LN_EPS: f64 = 1e-5;

/// How the output layers start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Output heads, FiLM projections and the side-condition weights start
    /// at zero, so the untrained model predicts uniform distributions.
    #[default]
    ZeroHeads,
    /// Everything random. Used for gradient checks.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    #[serde(default)]
    pub init: Init,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 3,
            hidden: 128,
            heads: 4,
            init: Init::ZeroHeads,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::setting("denoiser.layers", "must be positive"));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::setting("denoiser.hidden", "must be a positive multiple of heads"));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::setting("denoiser.hidden", "must be even"));
        }
        Ok(())
    }

    /// Number of scalar parameters for a node alphabet of `cells`.
    pub fn param_count(&self, cells: usize) -> usize {
        let (d, h, s) = (self.hidden, self.heads, cells);
        let linear = |i: usize, o: usize| i * o + o;
        let embed = 2 * (linear(s, d) + linear(d, d)) + linear(2, d) + linear(d, d);
        let context = linear(4 * d, d) + 2 * d;
        let layer = 14 * d * d + 17 * d + d * h;
        let heads = linear(d, d) + linear(d, s) + 3 * d * d + d + linear(d, 2);
        embed + context + self.layers * layer + heads
    }
}

/// Alternating attention and edge-update layers over one token per AeBS
/// and per GU, with the noisy association entering as an attention bias
/// and the step and graph summary entering through FiLM.
pub struct GraphTransformer {
    cfg: DenoiserConfig,
    cells: usize,
    params: Params,
    w: HashMap<String, Tensor>,
}

enum Fill {
    Weight(usize),
    Zeros,
    Ones,
}

impl GraphTransformer {
    pub fn new(cfg: DenoiserConfig, cells: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cells == 0 {
            return Err(Error::setting("grid", "no cells"));
        }
        let (d, h, s) = (cfg.hidden, cfg.heads, cells);
        let zero_heads = cfg.init == Init::ZeroHeads;
        let head_fill = |fan_in: usize| if zero_heads { Fill::Zeros } else { Fill::Weight(fan_in) };
        let bias_fill = |fan_in: usize| if zero_heads { Fill::Zeros } else { Fill::Weight(fan_in) };

        let mut shapes: Vec<(String, Vec<usize>, Fill)> = Vec::new();
        let linear = |shapes: &mut Vec<_>, name: &str, i: usize, o: usize, w: Fill, b: Fill| {
            shapes.push((format!("{name}.w"), vec![i, o], w));
            shapes.push((format!("{name}.b"), vec![o], b));
        };
        for name in ["node_in", "gu_in"] {
            linear(&mut shapes, name, s, d, Fill::Weight(1), bias_fill(d));
            linear(&mut shapes, &format!("{name}2"), d, d, Fill::Weight(d), bias_fill(d));
        }
        linear(&mut shapes, "edge_in", 2, d, Fill::Weight(1), bias_fill(d));
        linear(&mut shapes, "edge_in2", d, d, Fill::Weight(d), bias_fill(d));
        linear(&mut shapes, "ctx", 4 * d, d, Fill::Weight(4 * d), bias_fill(d));
        shapes.push(("power.w".into(), vec![d], head_fill(1)));
        shapes.push(("utility.w".into(), vec![d], head_fill(1)));
        for l in 0..cfg.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            for n in ["q", "k", "v", "o"] {
                linear(&mut shapes, &p(n), d, d, Fill::Weight(d), bias_fill(d));
            }
            shapes.push((p("edge_bias.w"), vec![d, h], Fill::Weight(d)));
            for n in ["ln1", "ln2", "ln_e"] {
                shapes.push((p(&format!("{n}.g")), vec![d], Fill::Ones));
                shapes.push((p(&format!("{n}.b")), vec![d], Fill::Zeros));
            }
            linear(&mut shapes, &p("film_scale"), d, d, head_fill(d), head_fill(d));
            linear(&mut shapes, &p("film_shift"), d, d, head_fill(d), head_fill(d));
            linear(&mut shapes, &p("ff1"), d, 2 * d, Fill::Weight(d), bias_fill(d));
            linear(&mut shapes, &p("ff2"), 2 * d, d, Fill::Weight(2 * d), bias_fill(d));
            for n in ["e_src", "e_dst", "e_self"] {
                shapes.push((p(&format!("{n}.w")), vec![d, d], Fill::Weight(d)));
            }
            shapes.push((p("e_hid.b"), vec![d], bias_fill(d)));
            linear(&mut shapes, &p("e_out"), d, d, Fill::Weight(d), bias_fill(d));
        }
        linear(&mut shapes, "node_head1", d, d, Fill::Weight(d), bias_fill(d));
        linear(&mut shapes, "node_head2", d, s, head_fill(d), head_fill(d));
        for n in ["edge_head.src", "edge_head.dst", "edge_head.self"] {
            shapes.push((format!("{n}.w"), vec![d, d], Fill::Weight(d)));
        }
        shapes.push(("edge_head.hid.b".into(), vec![d], bias_fill(d)));
        linear(&mut shapes, "edge_head.out", d, 2, head_fill(d), head_fill(d));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut params = Params::default();
        let mut w = HashMap::new();
        for (name, shape, fill) in shapes {
            let len: usize = shape.iter().product();
            let values: Vec<f64> = match fill {
                Fill::Zeros => vec![0.0; len],
                Fill::Ones => vec![1.0; len],
                Fill::Weight(fan_in) => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    (0..len).map(|_| scale * unit.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?;
            let handle = params.insert(name.clone(), t)?;
            w.insert(name, handle);
        }
        Ok(GraphTransformer { cfg, cells, params, w })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn p(&self, name: &str) -> &Tensor {
        self.w
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} registered in new"))
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(self.p(&format!("{name}.w")))?
            .broadcast_add(self.p(&format!("{name}.b")))?)
    }

    fn layer_norm(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(self.p(&format!("{name}.g")))?
            .broadcast_add(self.p(&format!("{name}.b")))?)
    }

    /// Embeds one-hot indices through a two-layer MLP.
    fn embed(&self, ids: &Tensor, name: &str) -> Result<Tensor> {
        let first = self
            .p(&format!("{name}.w"))
            .index_select(ids, 0)?
            .broadcast_add(self.p(&format!("{name}.b")))?
            .gelu()?;
        self.linear(&first, &format!("{name}2"))
    }

    fn step_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let d = self.cfg.hidden;
        let half = d / 2;
        let mut v = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            for j in 0..d {
                let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
                let arg = t as f64 * freq;
                v.push(if j < half { arg.sin() } else { arg.cos() });
            }
        }
        Ok(Tensor::from_vec(v, (ts.len(), d), &Device::Cpu)?)
    }

    /// Pairwise AeBS x GU features `[B, K, N, d]` from both endpoints and
    /// the current edge state.
    fn pair(&self, xa: &Tensor, xg: &Tensor, e: &Tensor, prefix: &str, bias: &str) -> Result<Tensor> {
        let src = xa.broadcast_matmul(self.p(&format!("{prefix}src.w")))?.unsqueeze(2)?;
        let dst = xg.broadcast_matmul(self.p(&format!("{prefix}dst.w")))?.unsqueeze(1)?;
        let own = e.broadcast_matmul(self.p(&format!("{prefix}self.w")))?;
        Ok(own.broadcast_add(&src)?.broadcast_add(&dst)?.broadcast_add(self.p(bias))?.gelu()?)
    }
}

fn softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let y = x.broadcast_sub(&m)?.exp()?;
    Ok(y.broadcast_div(&y.sum_keepdim(D::Minus1)?)?)
}

impl Denoiser for GraphTransformer {
    fn log_probs(&self, graphs: &[GraphState], ts: &[usize], cond: &Condition) -> Result<LogProbs> {
        let first = graphs.first().ok_or_else(|| Error::Graph("empty batch".into()))?;
        let (b, k, n) = (graphs.len(), first.num_aebs(), first.num_gus);
        let (d, h) = (self.cfg.hidden, self.cfg.heads);
        let dh = d / h;
        if n == 0 || n != cond.gu_cells.len() {
            return Err(Error::Graph(format!(
                "graph has {n} GUs, condition has {}",
                cond.gu_cells.len()
            )));
        }
        if cond.gu_cells.iter().any(|&c| c >= self.cells) {
            return Err(Error::Graph("GU cell outside the grid".into()));
        }
        if !cond.power.is_empty() && cond.power.len() != k {
            return Err(Error::Graph("one power entry per AeBS required".into()));
        }

        let node_ids = index_tensor(graphs.iter().flat_map(|g| g.nodes.iter().copied()), &[b * k])?;
        let mut xa = self.embed(&node_ids, "node_in")?.reshape((b, k, d))?;
        if !cond.power.is_empty() {
            let pw = Tensor::from_vec(cond.power.clone(), (1, k, 1), &Device::Cpu)?;
            xa = xa.broadcast_add(&pw.broadcast_mul(&self.p("power.w").reshape((1, 1, d))?)?)?;
        }
        let gu_ids = index_tensor(cond.gu_cells.iter().copied(), &[n])?;
        let xg = self.embed(&gu_ids, "gu_in")?.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let edge_ids = index_tensor(graphs.iter().flat_map(|g| g.edges.iter().map(|&x| x as usize)), &[b * k * n])?;
        let mut e = self.embed(&edge_ids, "edge_in")?.reshape((b, k, n, d))?;

        let summary = Tensor::cat(
            &[
                self.step_embedding(ts)?,
                xa.mean(1)?,
                xg.mean(1)?,
                e.mean((1, 2))?,
            ],
            1,
        )?;
        let utility = self.p("utility.w").affine(cond.utility, 0.0)?;
        let ctx = self.linear(&summary, "ctx")?.broadcast_add(&utility)?.gelu()?;

        let len = k + n;
        let mut x = Tensor::cat(&[&xa, &xg], 1)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.cfg.layers {
            let p = |name: &str| format!("layer{l}.{name}");
            let split = |t: Tensor| -> Result<Tensor> {
                Ok(t.reshape((b, len, h, dh))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(self.linear(&x, &p("q"))?)?;
            let kk = split(self.linear(&x, &p("k"))?)?;
            let v = split(self.linear(&x, &p("v"))?)?;
            let scores = (q.matmul(&kk.t()?.contiguous()?)? * scale)?;

            let eb = e.broadcast_matmul(self.p(&p("edge_bias.w")))?.permute((0, 3, 1, 2))?.contiguous()?;
            let top = Tensor::cat(&[&Tensor::zeros((b, h, k, k), DType::F64, &Device::Cpu)?, &eb], 3)?;
            let bottom = Tensor::cat(
                &[
                    &eb.transpose(2, 3)?.contiguous()?,
                    &Tensor::zeros((b, h, n, n), DType::F64, &Device::Cpu)?,
                ],
                3,
            )?;
            let bias = Tensor::cat(&[&top, &bottom], 2)?;
            let att = softmax(&(scores + bias)?)?;
            let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, len, d))?;
            x = self.layer_norm(&(&x + self.linear(&o, &p("o"))?)?, &p("ln1"))?;

            let gamma = (self.linear(&ctx, &p("film_scale"))? + 1.0)?.unsqueeze(1)?;
            let beta = self.linear(&ctx, &p("film_shift"))?.unsqueeze(1)?;
            x = x.broadcast_mul(&gamma)?.broadcast_add(&beta)?;
            let ff = self.linear(&self.linear(&x, &p("ff1"))?.gelu()?, &p("ff2"))?;
            x = self.layer_norm(&(&x + ff)?, &p("ln2"))?;

            let xa = x.narrow(1, 0, k)?;
            let xg = x.narrow(1, k, n)?;
            let hid = self.pair(&xa, &xg, &e, &p("e_"), &p("e_hid.b"))?;
            e = self.layer_norm(&(&e + self.linear(&hid, &p("e_out"))?)?, &p("ln_e"))?;
        }

        let xa = x.narrow(1, 0, k)?;
        let xg = x.narrow(1, k, n)?;
        let node_logits = self.linear(&self.linear(&xa, "node_head1")?.gelu()?, "node_head2")?;
        let hid = self.pair(&xa, &xg, &e, "edge_head.", "edge_head.hid.b")?;
        let edge_logits = self.linear(&hid, "edge_head.out")?;
        Ok(LogProbs {
            nodes: log_softmax(&node_logits)?,
            edges: Some(log_softmax(&edge_logits)?),
        })
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn cells(&self) -> usize {
        self.cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{predict, predict_batch};

    fn small(init: Init) -> GraphTransformer {
        let cfg = DenoiserConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            init,
        };
        GraphTransformer::new(cfg, 9, 3).unwrap()
    }

    fn graph(nodes: Vec<usize>, edges: Vec<u8>) -> GraphState {
        let n = edges.len() / nodes.len();
        GraphState::new(nodes, edges, n, 2).unwrap()
    }

    #[test]
    fn param_count_formula() {
        for (cfg, cells) in [
            (DenoiserConfig::default(), 100),
            (
                DenoiserConfig {
                    layers: 1,
                    hidden: 8,
                    heads: 2,
                    init: Init::Random,
                },
                9,
            ),
        ] {
            let model = GraphTransformer::new(cfg.clone(), cells, 0).unwrap();
            assert_eq!(model.params().count(), cfg.param_count(cells));
        }
    }

    #[test]
    fn untrained_predicts_uniform() {
        let model = small(Init::ZeroHeads);
        let cond = Condition::new(vec![0, 4, 8]);
        let pred = predict(&model, &graph(vec![1, 7], vec![1, 0, 0, 0, 1, 1]), 2, &cond).unwrap();
        for row in &pred.nodes {
            assert!(row.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-12));
        }
        for e in &pred.edges {
            assert!((e[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let model = small(Init::Random);
        let cond = Condition::new(vec![0, 4, 8]);
        let gs = [graph(vec![1, 7], vec![1, 0, 0, 0, 1, 1]), graph(vec![3, 3], vec![0; 6])];
        for pred in predict_batch(&model, &gs, &[1, 2], &cond).unwrap() {
            pred.validate().unwrap();
        }
    }

    #[test]
    fn batch_matches_single() {
        let model = small(Init::Random);
        let cond = Condition::new(vec![0, 4, 8]);
        let gs = [graph(vec![1, 7], vec![1, 0, 0, 0, 1, 1]), graph(vec![3, 5], vec![0, 1, 0, 1, 0, 0])];
        let both = predict_batch(&model, &gs, &[1, 2], &cond).unwrap();
        let second = predict(&model, &gs[1], 2, &cond).unwrap();
        for (a, b) in both[1].nodes.iter().flatten().zip(second.nodes.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gu_permutation_equivariance() {
        let model = small(Init::Random);
        let g = graph(vec![1, 7], vec![1, 0, 0, 0, 1, 1]);
        let a = predict(&model, &g, 1, &Condition::new(vec![0, 4, 8])).unwrap();
        // swap GUs 0 and 2 in both the condition and the edges
        let swapped = graph(vec![1, 7], vec![0, 0, 1, 1, 1, 0]);
        let b = predict(&model, &swapped, 1, &Condition::new(vec![8, 4, 0])).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0), (3, 5), (4, 4), (5, 3)] {
            assert!((a.edges[i][1] - b.edges[j][1]).abs() < 1e-10);
        }
        for (ra, rb) in a.nodes.iter().zip(&b.nodes) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn step_changes_prediction() {
        let model = small(Init::Random);
        let cond = Condition::new(vec![0, 4, 8]);
        let g = graph(vec![1, 7], vec![1, 0, 0, 0, 1, 1]);
        let a = predict(&model, &g, 1, &cond).unwrap();
        let b = predict(&model, &g, 2, &cond).unwrap();
        assert!(a.nodes[0].iter().zip(&b.nodes[0]).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
