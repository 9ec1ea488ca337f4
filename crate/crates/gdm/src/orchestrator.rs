//! Test-time alternation between diffusion sampling (placement and
//! association) and SCA beamforming, plus the evaluator every reported
//! number goes through.

use std::fs;
use std::io::Write;
use std::path::Path;

use lae_core::sca::{matched_filter_solution, run_sca, AccessScheme};
use lae_core::{audit_constraints, Association, ChannelRealization, ConstraintReport, Placement, RateReport, ResourceSolution};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{sample_trajectory, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{decode, effective_association, rates_of, Environment, GraphState};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    /// Stop once consecutive utilities differ by less than this.
    pub tau: f64,
    pub k_max: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { tau: 1e-5, k_max: 10 }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::setting("solve.k_max", "must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::setting("solve.tau", "must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to re-evaluate a deployment from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionBundle {
    pub channel_seed: u64,
    pub scheme: AccessScheme,
    pub placement: Placement,
    /// Declared association rows (K x N).
    pub association: Vec<Vec<u8>>,
    /// Precoders for the serviceable part of the association.
    pub resources: ResourceSolution,
}

/// Metrics recomputed by [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: RateReport,
    pub audit: ConstraintReport,
    pub penalty: f64,
    pub reward: f64,
    /// All indicators clear and C5, C7, C8 hold.
    pub feasible: bool,
}

impl Evaluation {
    pub fn utility(&self) -> f64 {
        self.report.utility
    }
}

/// Resources re-cut to the clusters of `assoc`: precoders of GUs no longer
/// served are dropped and newly served GUs get silent columns.
fn project(resources: &ResourceSolution, assoc: &Association, antennas: usize) -> (ResourceSolution, bool) {
    if resources.check_shape(assoc, antennas).is_ok() {
        return (resources.clone(), true);
    }
    let mut out = ResourceSolution::zeros(assoc, antennas);
    for (block, given) in out.aebs.iter_mut().zip(&resources.aebs) {
        if given.precoders.first().is_some_and(|c| c.len() == antennas) {
            block.precoders[0] = given.precoders[0].clone();
        }
        for (slot, &n) in block.served.clone().iter().enumerate() {
            if let Some(i) = given.slot(n) {
                if given.precoders.get(i + 1).is_some_and(|c| c.len() == antennas) {
                    block.precoders[slot + 1] = given.precoders[i + 1].clone();
                }
                block.common_split[slot] = given.common_split.get(i).copied().unwrap_or(0.0);
            }
        }
    }
    (out, false)
}

/// Recomputes rates, utility and the audit of a bundle on `channels`.
///
/// Resources that do not fit the serviceable association (a hand-edited
/// file, say) are re-cut to it and the result is never labeled feasible.
pub fn evaluate(bundle: &SolutionBundle, env: &Environment, channels: &ChannelRealization) -> Result<Evaluation> {
    let assoc = Association::from_rows(&bundle.association)?;
    let audit = audit_constraints(&bundle.placement, &assoc, &env.gus, &env.cfg);
    let effective = effective_association(env, &bundle.placement, &assoc);
    let (resources, fits) = project(&bundle.resources, &effective, env.cfg.antennas);
    let report = rates_of(env, &effective, channels, &resources)?;
    let penalty = env.weights.penalty(&audit);
    Ok(Evaluation {
        feasible: fits && audit.all_clear() && report.resources_ok(),
        reward: report.utility - penalty,
        penalty,
        audit,
        report,
    })
}

/// [`evaluate`] on the channels the bundle's seed realizes.
pub fn evaluate_seeded(bundle: &SolutionBundle, env: &Environment) -> Result<Evaluation> {
    let channels = env.channels(&bundle.placement, bundle.channel_seed)?;
    evaluate(bundle, env, &channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub utility: f64,
    pub reward: f64,
    pub feasible: bool,
    /// Utility, reward and feasibility of the best iterate so far.
    pub best_utility: f64,
    pub best_reward: f64,
    pub best_feasible: bool,
}

#[derive(Debug, Clone)]
pub struct Solved {
    pub graph: GraphState,
    pub bundle: SolutionBundle,
    pub evaluation: Evaluation,
}

impl Solved {
    /// Feasible iterates first, then by penalized reward.
    fn better_than(&self, other: &Solved) -> bool {
        let key = |s: &Solved| (s.evaluation.feasible, s.evaluation.reward);
        let (fa, ra) = key(self);
        let (fb, rb) = key(other);
        (fa && !fb) || (fa == fb && ra > rb)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub best: Solved,
    pub trace: Vec<TraceEntry>,
    /// Stopped on the utility tolerance rather than on `k_max`.
    pub converged: bool,
    pub warning: Option<String>,
}

/// Beamforming for one decoded deployment: SCA, or the matched-filter
/// start when every rung of the SCA ladder fails.
pub fn beamform(env: &Environment, assoc: &Association, channels: &ChannelRealization) -> Result<ResourceSolution> {
    match run_sca(assoc, channels, &env.cfg, &env.sca) {
        Ok(out) => Ok(out.solution),
        Err(e) => {
            log::warn!("SCA failed ({e}); keeping the matched-filter start");
            Ok(matched_filter_solution(assoc, channels, &env.cfg, env.scheme())?)
        }
    }
}

fn realize(graph: GraphState, env: &Environment, channel_seed: u64) -> Result<Solved> {
    let (placement, assoc) = decode(&graph, &env.grid, &env.cfg)?;
    let channels = env.channels(&placement, channel_seed)?;
    let effective = effective_association(env, &placement, &assoc);
    let resources = beamform(env, &effective, &channels)?;
    let bundle = SolutionBundle {
        channel_seed,
        scheme: env.scheme(),
        placement,
        association: assoc.rows(),
        resources,
    };
    let evaluation = evaluate(&bundle, env, &channels)?;
    Ok(Solved {
        graph,
        bundle,
        evaluation,
    })
}

/// Alternates sampling a deployment conditioned on the current resources
/// with SCA on the sampled deployment, returning the best iterate.
pub fn alternate<D: Denoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    env: &Environment,
    channel_seed: u64,
    cfg: &SolveConfig,
    seed: u64,
) -> Result<SolveOutcome> {
    cfg.validate()?;
    let mut cond = Condition::new(env.gu_cells());
    let mut best: Option<Solved> = None;
    let mut trace = Vec::new();
    let mut previous: Option<f64> = None;
    let mut converged = false;
    for k in 0..cfg.k_max {
        let mut rng = seeds::rng(seed, Stream::Solve, k as u64, 0);
        let chain = sample_trajectory(den, schedule, env.cfg.num_aebs, &cond, &mut rng)?;
        let graph = chain.last().expect("trajectory has T + 1 states").clone();
        let current = realize(graph, env, channel_seed)?;
        let u = current.evaluation.utility();
        if best.as_ref().is_none_or(|b| current.better_than(b)) {
            best = Some(current.clone());
        }
        let b = best.as_ref().expect("set above");
        trace.push(TraceEntry {
            k,
            utility: u,
            reward: current.evaluation.reward,
            feasible: current.evaluation.feasible,
            best_utility: b.evaluation.utility(),
            best_reward: b.evaluation.reward,
            best_feasible: b.evaluation.feasible,
        });
        cond.utility = b.evaluation.utility();
        cond.power = b
            .evaluation
            .report
            .power
            .iter()
            .map(|p| p / env.cfg.p_max_w)
            .collect();
        if previous.is_some_and(|prev| (u - prev).abs() < cfg.tau) {
            converged = true;
            break;
        }
        previous = Some(u);
    }
    let best = best.expect("k_max >= 1");
    let warning = (!best.evaluation.feasible)
        .then(|| "no feasible iterate; returning the best penalized candidate".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(SolveOutcome {
        best,
        trace,
        converged,
        warning,
    })
}

/// `solution.json`: the bundle, the clean graph and the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub seed: u64,
    pub graph: GraphState,
    #[serde(flatten)]
    pub bundle: SolutionBundle,
    pub utility: f64,
    pub coverage: f64,
    pub sum_rate: f64,
    pub reward: f64,
    /// Indicators (association, location, collision, range).
    pub indicators: [u8; 4],
    pub feasible: bool,
}

impl SolutionFile {
    pub fn new(seed: u64, solved: &Solved) -> Self {
        let e = &solved.evaluation;
        SolutionFile {
            seed,
            graph: solved.graph.clone(),
            bundle: solved.bundle.clone(),
            utility: e.report.utility,
            coverage: e.report.coverage,
            sum_rate: e.report.sum_rate,
            reward: e.reward,
            indicators: e.audit.indicators(),
            feasible: e.feasible,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Writes `config.toml`, `seed`, `trace.jsonl`, `solution.json` and
/// `rates.csv` into `dir`.
pub fn write_artifacts(dir: &Path, config_toml: &str, seed: u64, outcome: &SolveOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write("config.toml", config_toml.as_bytes())?;
    write("seed", format!("{seed}\n").as_bytes())?;
    let mut trace = Vec::new();
    for entry in &outcome.trace {
        serde_json::to_writer(&mut trace, entry)?;
        trace.push(b'\n');
    }
    write("trace.jsonl", &trace)?;
    let solution = SolutionFile::new(seed, &outcome.best);
    write("solution.json", &serde_json::to_vec_pretty(&solution)?)?;
    let mut rates = Vec::new();
    outcome.best.evaluation.report.write_csv(&mut rates)?;
    rates.flush().map_err(|e| Error::io(dir, e))?;
    write("rates.csv", &rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::TableDenoiser;
    use crate::diffusion::Stationary;
    use crate::graph::encode;
    use lae_core::{place_gus, GuLayout, NetworkConfig};

    fn env() -> Environment {
        let cfg = NetworkConfig::desk();
        let gus = place_gus(&GuLayout::default(), &cfg, 3).unwrap();
        Environment::new(cfg, 10, gus).unwrap()
    }

    fn feasible_graph(env: &Environment) -> GraphState {
        // each AeBS above the centroid of the GUs of its hotspot
        let k = env.cfg.num_aebs;
        let mut rows = vec![vec![0u8; env.gus.len()]; k];
        let mut centers = Vec::new();
        for a in 0..k {
            let members: Vec<usize> = (0..env.gus.len()).filter(|n| n % k == a).collect();
            let cx = members.iter().map(|&n| env.gus[n].x).sum::<f64>() / members.len() as f64;
            let cy = members.iter().map(|&n| env.gus[n].y).sum::<f64>() / members.len() as f64;
            centers.push(env.grid.center(env.grid.cell_of(&lae_core::Point2::new(cx, cy))).unwrap());
            for &n in &members {
                rows[a][n] = 1;
            }
        }
        let placement = Placement::new(centers, env.cfg.altitude_m);
        encode(&placement, &Association::from_rows(&rows).unwrap(), &env.grid).unwrap()
    }

    #[test]
    fn evaluate_reproduces_realized_utility() {
        let env = env();
        let solved = realize(feasible_graph(&env), &env, 5).unwrap();
        assert!(solved.evaluation.audit.all_clear());
        let again = evaluate_seeded(&solved.bundle, &env).unwrap();
        assert!((again.utility() - solved.evaluation.utility()).abs() < 1e-9);
        assert_eq!(again.feasible, solved.evaluation.feasible);
    }

    #[test]
    fn zero_precoders_leave_coverage_only() {
        let env = env();
        let mut solved = realize(feasible_graph(&env), &env, 5).unwrap();
        let assoc = Association::from_rows(&solved.bundle.association).unwrap();
        solved.bundle.resources = ResourceSolution::zeros(&assoc, env.cfg.antennas);
        let e = evaluate_seeded(&solved.bundle, &env).unwrap();
        assert_eq!(e.report.sum_rate, 0.0);
        assert!((e.utility() - env.cfg.lambda1 * e.report.coverage).abs() < 1e-12);
    }

    #[test]
    fn tampered_association_is_flagged() {
        let env = env();
        let mut solved = realize(feasible_graph(&env), &env, 5).unwrap();
        // GU 0 served by both AeBSs breaks C1
        solved.bundle.association[0][0] = 1;
        solved.bundle.association[1][0] = 1;
        let e = evaluate_seeded(&solved.bundle, &env).unwrap();
        assert!(!e.audit.c1_ok);
        assert_eq!(e.audit.xi_a, 1);
        assert!(!e.feasible);
    }

    #[test]
    fn single_iteration_and_nondecreasing_best() {
        let env = env();
        let schedule = NoiseSchedule::cosine(3, env.grid.cells(), 2, Stationary::Uniform).unwrap();
        let den = TableDenoiser::zeros(2, env.gus.len(), env.grid.cells()).unwrap();
        let one = alternate(&den, &schedule, &env, 1, &SolveConfig { tau: 1e-5, k_max: 1 }, 9).unwrap();
        assert_eq!(one.trace.len(), 1);
        let many = alternate(&den, &schedule, &env, 1, &SolveConfig { tau: 1e-5, k_max: 4 }, 9).unwrap();
        assert!(many.trace.len() <= 4);
        assert_eq!(many.trace[0], one.trace[0]);
        for w in many.trace.windows(2) {
            let key = |e: &TraceEntry| (e.best_feasible, e.best_reward);
            assert!(key(&w[1]) >= key(&w[0]));
            if w[0].best_feasible {
                assert!(w[1].best_utility >= w[0].best_utility);
            }
        }
        let again = evaluate_seeded(&many.best.bundle, &env).unwrap();
        assert!((again.utility() - many.best.evaluation.utility()).abs() < 1e-9);
    }

    #[test]
    fn artifacts_are_written() {
        let env = env();
        let schedule = NoiseSchedule::cosine(2, env.grid.cells(), 2, Stationary::Uniform).unwrap();
        let den = TableDenoiser::zeros(2, env.gus.len(), env.grid.cells()).unwrap();
        let out = alternate(&den, &schedule, &env, 1, &SolveConfig { tau: 1e-5, k_max: 2 }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_artifacts(dir.path(), "# cfg\n", 4, &out).unwrap();
        for f in ["config.toml", "seed", "trace.jsonl", "solution.json", "rates.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = SolutionFile::read(&dir.path().join("solution.json")).unwrap();
        assert_eq!(back.bundle, out.best.bundle);
        assert_eq!(back.feasible, out.best.evaluation.feasible);
    }
}
