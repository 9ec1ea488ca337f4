//! Deployment graphs: one categorical grid cell per AeBS node, one binary
//! state per AeBS-GU edge. Also the penalty-constrained reward and the
//! denoising MDP bookkeeping.

use std::str::FromStr;

use lae_core::model::serviceable_association;
use lae_core::rates::{rate_report, sdma_rate_report, RateReport, ResourceSolution};
use lae_core::sca::{matched_filter_solution, run_sca, AccessScheme, ScaOptions};
use lae_core::{
    audit_constraints, realize_channels, Association, ChannelRealization, ConstraintReport,
    NetworkConfig, Placement, Point2,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// G x G cell centers covering the task area, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub size: usize,
    pub area_x: [f64; 2],
    pub area_y: [f64; 2],
}

impl Grid {
    pub fn new(size: usize, cfg: &NetworkConfig) -> Result<Self> {
        if size == 0 {
            return Err(Error::setting("grid", "need at least one cell per side"));
        }
        Ok(Grid {
            size,
            area_x: cfg.area_x,
            area_y: cfg.area_y,
        })
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    fn step(&self) -> (f64, f64) {
        let g = self.size as f64;
        ((self.area_x[1] - self.area_x[0]) / g, (self.area_y[1] - self.area_y[0]) / g)
    }

    pub fn center(&self, cell: usize) -> Result<Point2> {
        if cell >= self.cells() {
            return Err(Error::Graph(format!("cell {cell} outside a {} x {0} grid", self.size)));
        }
        let (dx, dy) = self.step();
        let (row, col) = (cell / self.size, cell % self.size);
        Ok(Point2::new(
            self.area_x[0] + (col as f64 + 0.5) * dx,
            self.area_y[0] + (row as f64 + 0.5) * dy,
        ))
    }

    /// Cell containing `p`; points outside the area map to the nearest cell.
    pub fn cell_of(&self, p: &Point2) -> usize {
        let (dx, dy) = self.step();
        let last = (self.size - 1) as f64;
        let col = ((p.x - self.area_x[0]) / dx).floor().clamp(0.0, last) as usize;
        let row = ((p.y - self.area_y[0]) / dy).floor().clamp(0.0, last) as usize;
        row * self.size + col
    }
}

/// Node states, edge states and the diffusion step they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "CompactGraph", try_from = "CompactGraph")]
pub struct GraphState {
    pub nodes: Vec<usize>,
    /// Row-major K x N edge states, each 0 or 1.
    pub edges: Vec<u8>,
    pub num_gus: usize,
    pub t: usize,
}

/// Wire form: edges as one `0`/`1` string per AeBS.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompactGraph {
    t: usize,
    nodes: Vec<usize>,
    edges: Vec<String>,
}

impl From<GraphState> for CompactGraph {
    fn from(g: GraphState) -> Self {
        let edges = (0..g.num_aebs())
            .map(|k| g.edge_row(k).iter().map(|&e| if e == 1 { '1' } else { '0' }).collect())
            .collect();
        CompactGraph {
            t: g.t,
            nodes: g.nodes,
            edges,
        }
    }
}

impl TryFrom<CompactGraph> for GraphState {
    type Error = String;

    fn try_from(c: CompactGraph) -> std::result::Result<Self, String> {
        if c.edges.len() != c.nodes.len() {
            return Err(format!("{} edge rows for {} nodes", c.edges.len(), c.nodes.len()));
        }
        let num_gus = c.edges.first().map_or(0, |r| r.len());
        let mut edges = Vec::with_capacity(num_gus * c.nodes.len());
        for row in &c.edges {
            if row.len() != num_gus {
                return Err("edge rows differ in length".into());
            }
            for ch in row.chars() {
                edges.push(match ch {
                    '0' => 0,
                    '1' => 1,
                    other => return Err(format!("edge state {other:?} is not 0 or 1")),
                });
            }
        }
        Ok(GraphState {
            nodes: c.nodes,
            edges,
            num_gus,
            t: c.t,
        })
    }
}

impl GraphState {
    pub fn new(nodes: Vec<usize>, edges: Vec<u8>, num_gus: usize, t: usize) -> Result<Self> {
        if edges.len() != nodes.len() * num_gus {
            return Err(Error::Graph(format!(
                "{} edge states for {} x {num_gus}",
                edges.len(),
                nodes.len()
            )));
        }
        if let Some(e) = edges.iter().find(|&&e| e > 1) {
            return Err(Error::Graph(format!("edge state {e} is not binary")));
        }
        Ok(GraphState {
            nodes,
            edges,
            num_gus,
            t,
        })
    }

    pub fn num_aebs(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge(&self, k: usize, n: usize) -> u8 {
        self.edges[k * self.num_gus + n]
    }

    pub fn edge_row(&self, k: usize) -> &[u8] {
        &self.edges[k * self.num_gus..(k + 1) * self.num_gus]
    }

    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    /// Checks alphabet membership against `cells` node states.
    pub fn validate(&self, cells: usize) -> Result<()> {
        if let Some(&c) = self.nodes.iter().find(|&&c| c >= cells) {
            return Err(Error::Graph(format!("node state {c} outside {cells} cells")));
        }
        if self.edges.len() != self.nodes.len() * self.num_gus || self.edges.iter().any(|&e| e > 1) {
            return Err(Error::Graph("malformed edge states".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph states always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Placement at the cell centers, edges copied to the association.
pub fn decode(graph: &GraphState, grid: &Grid, cfg: &NetworkConfig) -> Result<(Placement, Association)> {
    graph.validate(grid.cells())?;
    let positions = graph
        .nodes
        .iter()
        .map(|&c| grid.center(c))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<u8>> = (0..graph.num_aebs()).map(|k| graph.edge_row(k).to_vec()).collect();
    let assoc = if rows.is_empty() {
        Association::empty(0, graph.num_gus)
    } else {
        Association::from_rows(&rows)?
    };
    Ok((Placement::new(positions, cfg.altitude_m), assoc))
}

/// Inverse of [`decode`] for placements on cell centers.
pub fn encode(placement: &Placement, assoc: &Association, grid: &Grid) -> Result<GraphState> {
    if assoc.num_aebs() != placement.len() {
        return Err(Error::Graph("placement and association disagree on K".into()));
    }
    let mut nodes = Vec::with_capacity(placement.len());
    for p in &placement.positions {
        let cell = grid.cell_of(p);
        let c = grid.center(cell)?;
        if (c.x - p.x).abs() > 1e-9 || (c.y - p.y).abs() > 1e-9 {
            return Err(Error::Graph(format!("({}, {}) is not a cell center", p.x, p.y)));
        }
        nodes.push(cell);
    }
    let edges = assoc.rows().concat();
    if edges.iter().any(|&e| e > 1) {
        return Err(Error::Graph("association is not binary".into()));
    }
    GraphState::new(nodes, edges, assoc.num_gus(), 0)
}

/// Penalty weights of the association, location, collision and range
/// indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyWeights {
    pub association: f64,
    pub location: f64,
    pub collision: f64,
    pub range: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            association: 1.0,
            location: 1.0,
            collision: 1.0,
            range: 1.0,
        }
    }
}

impl PenaltyWeights {
    pub fn penalty(&self, audit: &ConstraintReport) -> f64 {
        let [a, m, c, r] = audit.indicators().map(f64::from);
        self.association * a + self.location * m + self.collision * c + self.range * r
    }
}

/// How the utility inside the reward obtains beamformers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Full SCA beamforming per scored graph.
    Exact,
    /// Matched-filter precoders with the induced common split.
    #[default]
    Surrogate,
}

impl FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(RewardMode::Exact),
            "surrogate" => Ok(RewardMode::Surrogate),
            other => Err(format!("unknown reward mode {other:?} (expected exact or surrogate)")),
        }
    }
}

/// Everything needed to score a graph: the network, the GUs and the
/// reward shaping. GU positions are fixed for the lifetime of an
/// environment; channels are redrawn per episode from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub cfg: NetworkConfig,
    pub grid: Grid,
    pub gus: Vec<Point2>,
    pub weights: PenaltyWeights,
    pub sca: ScaOptions,
}

impl Environment {
    pub fn new(cfg: NetworkConfig, grid_size: usize, gus: Vec<Point2>) -> Result<Self> {
        cfg.validate()?;
        if gus.len() != cfg.num_gus {
            return Err(Error::setting("gus", format!("{} positions for N = {}", gus.len(), cfg.num_gus)));
        }
        Ok(Environment {
            grid: Grid::new(grid_size, &cfg)?,
            cfg,
            gus,
            weights: PenaltyWeights::default(),
            sca: ScaOptions::default(),
        })
    }

    pub fn scheme(&self) -> AccessScheme {
        self.sca.scheme
    }

    /// Grid cell of every GU, the per-GU input feature of the denoiser.
    pub fn gu_cells(&self) -> Vec<usize> {
        self.gus.iter().map(|p| self.grid.cell_of(p)).collect()
    }

    pub fn channels(&self, placement: &Placement, channel_seed: u64) -> Result<ChannelRealization> {
        Ok(realize_channels(placement, &self.gus, &self.cfg, channel_seed)?)
    }
}

/// One scored deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub reward: f64,
    pub utility: f64,
    pub coverage: f64,
    pub sum_rate: f64,
    pub audit: ConstraintReport,
}

impl Scored {
    pub fn feasible(&self) -> bool {
        self.audit.all_clear()
    }
}

/// Links that carry traffic: the sampled association minus multi-assigned
/// GUs and links beyond the communication radius.
pub fn effective_association(env: &Environment, placement: &Placement, assoc: &Association) -> Association {
    serviceable_association(placement, assoc, &env.gus, &env.cfg)
}

/// Beamformers for `assoc` under `mode`. An SCA run that fails outright
/// falls back to the matched-filter start so that every graph is scored.
pub fn resources_for(
    env: &Environment,
    assoc: &Association,
    channels: &ChannelRealization,
    mode: RewardMode,
) -> Result<ResourceSolution> {
    let surrogate = || matched_filter_solution(assoc, channels, &env.cfg, env.scheme());
    match mode {
        RewardMode::Surrogate => Ok(surrogate()?),
        RewardMode::Exact => match run_sca(assoc, channels, &env.cfg, &env.sca) {
            Ok(out) => Ok(out.solution),
            Err(e) => {
                log::warn!("SCA failed ({e}); scoring the matched-filter start instead");
                Ok(surrogate()?)
            }
        },
    }
}

/// Rates of `resources` over the effective association `assoc`.
pub fn rates_of(
    env: &Environment,
    assoc: &Association,
    channels: &ChannelRealization,
    resources: &ResourceSolution,
) -> Result<RateReport> {
    Ok(match env.scheme() {
        AccessScheme::Rsma => rate_report(assoc, channels, resources, &env.cfg)?,
        AccessScheme::Sdma => sdma_rate_report(assoc, channels, resources, &env.cfg)?,
    })
}

/// Penalty-constrained reward `U - w . xi` of a graph.
///
/// The utility is computed on the effective association, so GUs that break
/// C1 or C10 contribute neither coverage nor rate.
pub fn reward(graph: &GraphState, env: &Environment, channel_seed: u64, mode: RewardMode) -> Result<Scored> {
    let (placement, assoc) = decode(graph, &env.grid, &env.cfg)?;
    let audit = audit_constraints(&placement, &assoc, &env.gus, &env.cfg);
    let effective = effective_association(env, &placement, &assoc);
    let channels = env.channels(&placement, channel_seed)?;
    let resources = resources_for(env, &effective, &channels, mode)?;
    let report = rates_of(env, &effective, &channels, &resources)?;
    Ok(Scored {
        reward: report.utility - env.weights.penalty(&audit),
        utility: report.utility,
        coverage: report.coverage,
        sum_rate: report.sum_rate,
        audit,
    })
}

/// One step of the denoising MDP: state `G^t` at step `t`, action
/// `G^{t-1}`, reward paid only on reaching `G^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpTransition {
    pub state: GraphState,
    pub action: GraphState,
    pub reward: f64,
}

/// Turns a sampled chain `G^T, ..., G^0` into transitions.
pub fn transitions(chain: &[GraphState], terminal_reward: f64) -> Result<Vec<MdpTransition>> {
    if chain.len() < 2 {
        return Err(Error::Graph("a trajectory needs at least two states".into()));
    }
    let last = chain.len() - 2;
    Ok(chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| MdpTransition {
            state: w[0].clone(),
            action: w[1].clone(),
            reward: if i == last { terminal_reward } else { 0.0 },
        })
        .collect())
}

/// Accumulated reward of a trajectory, which is its terminal reward.
pub fn trajectory_return(trajectory: &[MdpTransition]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::Graph("empty trajectory".into()));
    }
    Ok(trajectory.iter().map(|s| s.reward).sum())
}
