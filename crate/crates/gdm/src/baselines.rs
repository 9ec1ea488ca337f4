//! Comparators scored through the same evaluator as the diffusion pipeline.

use std::io::Write;
use std::path::Path;

use lae_core::rates::allocate_common_split;
use lae_core::sca::AccessScheme;
use lae_core::ResourceSolution;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::TableDenoiser;
use crate::error::Result;
use crate::graph::{decode, effective_association, rates_of, Environment, GraphState};
use crate::orchestrator::{evaluate, SolutionBundle, Solved};
use crate::seeds::{self, Stream};
use crate::trainer::{Policy, StepMetrics, TrainConfig, Trainer};

/// The same environment with the common stream disabled everywhere.
pub fn sdma(env: &Environment) -> Environment {
    let mut out = env.clone();
    out.sca.scheme = AccessScheme::Sdma;
    out
}

/// How the random policy draws links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomLinks {
    /// Uniform over associations with one AeBS per GU and between 2 and
    /// `max_gus_per_aebs` GUs per AeBS.
    #[default]
    ValidShape,
    /// Every AeBS-GU link on with probability 1/2.
    Independent,
}

fn valid_shape_edges<R: Rng>(k: usize, n: usize, max_per: usize, rng: &mut R) -> Vec<u8> {
    loop {
        let owner: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ok = (0..k).all(|a| {
            let size = owner.iter().filter(|&&o| o == a).count();
            (2..=max_per).contains(&size)
        });
        if ok {
            let mut edges = vec![0u8; k * n];
            for (g, &a) in owner.iter().enumerate() {
                edges[a * n + g] = 1;
            }
            return edges;
        }
    }
}

/// Uniform cells, random links and random precoders at full power, with
/// the common rate split by the default rule.
pub fn random_policy(env: &Environment, channel_seed: u64, seed: u64) -> Result<Solved> {
    random_policy_with(env, RandomLinks::default(), channel_seed, seed)
}

pub fn random_policy_with(env: &Environment, links: RandomLinks, channel_seed: u64, seed: u64) -> Result<Solved> {
    let mut rng = seeds::rng(seed, Stream::Baseline, 0, 0);
    let k = env.cfg.num_aebs;
    let n = env.gus.len();
    let nodes: Vec<usize> = (0..k).map(|_| rng.random_range(0..env.grid.cells())).collect();
    let edges: Vec<u8> = match links {
        RandomLinks::Independent => (0..k * n).map(|_| u8::from(rng.random_bool(0.5))).collect(),
        RandomLinks::ValidShape => valid_shape_edges(k, n, env.cfg.max_gus_per_aebs, &mut rng),
    };
    let graph = GraphState::new(nodes, edges, n, 0)?;
    let (placement, assoc) = decode(&graph, &env.grid, &env.cfg)?;
    let channels = env.channels(&placement, channel_seed)?;
    let effective = effective_association(env, &placement, &assoc);

    let mut resources = ResourceSolution::zeros(&effective, env.cfg.antennas);
    let sdma = env.scheme() == AccessScheme::Sdma;
    for block in &mut resources.aebs {
        if block.served.is_empty() {
            continue;
        }
        for (col, precoder) in block.precoders.iter_mut().enumerate() {
            if sdma && col == 0 {
                continue;
            }
            for x in precoder.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *x = Complex64::new(re, im);
            }
        }
        let scale = (env.cfg.p_max_w / block.power()).sqrt();
        block
            .precoders
            .iter_mut()
            .flatten()
            .for_each(|x| *x *= scale);
    }
    if !sdma {
        let report = rates_of(env, &effective, &channels, &resources)?;
        for (k, block) in resources.aebs.iter_mut().enumerate() {
            let private: Vec<f64> = block.served.iter().map(|&g| report.gus[g].r_private).collect();
            block.common_split = allocate_common_split(report.common_cap[k], &private, env.cfg.r_min);
        }
    }
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

/// One-shot categorical policy over nodes and edges trained with the same
/// reward, optimizer and budget as the diffusion model.
pub fn direct_pg_policy(
    env: &Environment,
    cfg: &TrainConfig,
    seed: u64,
    snapshot: serde_json::Value,
    metrics: Option<&mut dyn Write>,
    ckpt_dir: Option<&Path>,
) -> Result<(TableDenoiser, Vec<StepMetrics>)> {
    let policy = TableDenoiser::zeros(env.cfg.num_aebs, env.gus.len(), env.grid.cells())?;
    let curve = {
        let mut trainer = Trainer::new(env, &policy, Policy::OneShot, cfg.clone(), seed, snapshot)?;
        trainer.run(metrics, ckpt_dir)?
    };
    Ok((policy, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use lae_core::{place_gus, GuLayout, NetworkConfig};

    fn env() -> Environment {
        let cfg = NetworkConfig::desk();
        let gus = place_gus(&GuLayout::default(), &cfg, 3).unwrap();
        Environment::new(cfg, 10, gus).unwrap()
    }

    #[test]
    fn random_policy_meets_power_budget() {
        let env = env();
        for seed in 0..20 {
            let s = random_policy(&env, seed, seed).unwrap();
            assert!(s.evaluation.report.c8_ok.iter().all(|&b| b));
            for (block, p) in s.bundle.resources.aebs.iter().zip(&s.evaluation.report.power) {
                if !block.served.is_empty() {
                    assert!((p - env.cfg.p_max_w).abs() < 1e-9 * env.cfg.p_max_w);
                }
            }
            assert!(s.evaluation.report.c5_ok.iter().all(|&b| b));
        }
    }

    #[test]
    fn random_policy_is_reproducible() {
        let env = env();
        let a = random_policy(&env, 1, 2).unwrap();
        let b = random_policy(&env, 1, 2).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.evaluation, b.evaluation);
    }

    #[test]
    fn valid_shape_links_clear_the_association_flag() {
        let env = env();
        for seed in 0..30 {
            let s = random_policy_with(&env, RandomLinks::ValidShape, seed, seed).unwrap();
            for g in 0..env.gus.len() {
                assert_eq!(s.bundle.association.iter().map(|r| r[g]).sum::<u8>(), 1);
            }
            assert!(s.bundle.association.iter().all(|r| r.iter().filter(|&&a| a == 1).count() >= 2));
            assert_eq!(s.evaluation.audit.xi_a, 0);
        }
    }

    #[test]
    fn sdma_random_policy_has_no_common_stream() {
        let env = sdma(&env());
        let s = random_policy(&env, 1, 2).unwrap();
        for block in &s.bundle.resources.aebs {
            assert_eq!(block.common_power(), 0.0);
            assert!(block.common_split.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn untrained_direct_policy_matches_random_placement_law() {
        // zero steps: the policy stays uniform over cells and links
        let env = env();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (policy, curve) = direct_pg_policy(&env, &cfg, 0, serde_json::json!({}), None, None).unwrap();
        assert!(curve.is_empty());
        assert!(policy.params().flat().unwrap().iter().all(|&x| x == 0.0));
    }
}
