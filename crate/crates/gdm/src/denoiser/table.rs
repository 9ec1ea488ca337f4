use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{log_softmax, Condition, Denoiser, LogProbs, Params};
use crate::error::{Error, Result};
use crate::graph::GraphState;

/// Free logits per node and edge, ignoring the noisy input.
///
/// As a denoiser this is the smallest possible head; used one-shot it is
/// the direct policy-gradient baseline.
pub struct TableDenoiser {
    params: Params,
    node_logits: Tensor,
    edge_logits: Option<Tensor>,
    num_aebs: usize,
    num_gus: usize,
    cells: usize,
}

impl TableDenoiser {
    /// All logits zero: uniform distributions.
    pub fn zeros(num_aebs: usize, num_gus: usize, cells: usize) -> Result<Self> {
        Self::from_values(
            num_aebs,
            num_gus,
            cells,
            vec![0.0; num_aebs * cells],
            vec![0.0; num_aebs * num_gus * 2],
        )
    }

    /// Standard normal logits.
    pub fn random(num_aebs: usize, num_gus: usize, cells: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |len: usize| (0..len).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
        let nodes = draw(num_aebs * cells);
        let edges = draw(num_aebs * num_gus * 2);
        Self::from_values(num_aebs, num_gus, cells, nodes, edges)
    }

    pub fn from_values(
        num_aebs: usize,
        num_gus: usize,
        cells: usize,
        node_logits: Vec<f64>,
        edge_logits: Vec<f64>,
    ) -> Result<Self> {
        if num_aebs == 0 || cells == 0 {
            return Err(Error::setting("table", "need at least one node and one cell"));
        }
        let mut params = Params::default();
        let node_logits = params.insert("node_logits", Tensor::from_vec(node_logits, (num_aebs, cells), &Device::Cpu)?)?;
        let edge_logits = if num_gus > 0 {
            Some(params.insert(
                "edge_logits",
                Tensor::from_vec(edge_logits, (num_aebs, num_gus, 2), &Device::Cpu)?,
            )?)
        } else {
            None
        };
        Ok(TableDenoiser {
            params,
            node_logits,
            edge_logits,
            num_aebs,
            num_gus,
            cells,
        })
    }
}

impl Denoiser for TableDenoiser {
    fn log_probs(&self, graphs: &[GraphState], _ts: &[usize], _cond: &Condition) -> Result<LogProbs> {
        let b = graphs.len();
        if graphs.iter().any(|g| g.num_aebs() != self.num_aebs || g.num_gus != self.num_gus) {
            return Err(Error::Graph("graph shape differs from the table".into()));
        }
        let nodes = log_softmax(&self.node_logits)?
            .unsqueeze(0)?
            .broadcast_as((b, self.num_aebs, self.cells))?
            .contiguous()?;
        let edges = match &self.edge_logits {
            Some(e) => Some(
                log_softmax(e)?
                    .unsqueeze(0)?
                    .broadcast_as((b, self.num_aebs, self.num_gus, 2))?
                    .contiguous()?,
            ),
            None => None,
        };
        Ok(LogProbs { nodes, edges })
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn cells(&self) -> usize {
        self.cells
    }
}
