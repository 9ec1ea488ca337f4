use std::path::Path;

use lae_gdm::config::RunConfig;
use lae_gdm::diffusion::{posterior, posterior_mixture, NoiseSchedule, Stationary};
use lae_gdm::graph::{decode, encode, reward, transitions, trajectory_return, GraphState, RewardMode};
use proptest::prelude::*;

#[test]
fn desk_file_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded, RunConfig::desk());
}

#[test]
fn config_toml_round_trip() {
    let cfg = RunConfig::desk();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn advantage_modes_parse() {
    let text = RunConfig::desk().to_toml();
    assert!(text.contains("advantage = \"ema\""));
    let cfg = RunConfig::from_toml_str(&text.replace("advantage = \"ema\"", "advantage = \"standardized\"")).unwrap();
    assert_eq!(cfg.train.advantage, lae_gdm::trainer::Advantage::Standardized);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = format!("{}\n[bogus]\nx = 1\n", RunConfig::desk().to_toml());
    assert!(RunConfig::from_toml_str(&text).is_err());
}

fn graph_strategy(k: usize, n: usize, cells: usize) -> impl Strategy<Value = GraphState> {
    (
        prop::collection::vec(0..cells, k),
        prop::collection::vec(0u8..2, k * n),
        0usize..20,
    )
        .prop_map(move |(nodes, edges, t)| GraphState::new(nodes, edges, n, t).unwrap())
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::cosine(10, 6, 2, Stationary::Uniform).unwrap()
}

proptest! {
    #[test]
    fn graph_json_round_trip(g in graph_strategy(3, 5, 100)) {
        prop_assert_eq!(GraphState::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn encode_inverts_decode(g in graph_strategy(2, 8, 100)) {
        let cfg = RunConfig::desk();
        let env = cfg.environment().unwrap();
        let (placement, assoc) = decode(&g, &env.grid, &env.cfg).unwrap();
        prop_assert_eq!(encode(&placement, &assoc, &env.grid).unwrap(), g.with_t(0));
    }

    #[test]
    fn posterior_is_a_distribution(x0 in 0usize..6, xt in 0usize..6, t in 1usize..=10) {
        let s = schedule();
        let prior = vec![1.0 / 6.0; 6];
        let p = posterior(x0, xt, t, &s, &prior).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_matches_explicit_sum(
        w in prop::collection::vec(0.01f64..1.0, 6),
        xt in 0usize..6,
        t in 1usize..=10,
    ) {
        let s = schedule();
        let prior = vec![1.0 / 6.0; 6];
        let z: f64 = w.iter().sum();
        let pred: Vec<f64> = w.iter().map(|v| v / z).collect();
        let fast = posterior_mixture(&pred, xt, t, &s, &prior).unwrap();
        let mut slow = vec![0.0; 6];
        for (x0, &p) in pred.iter().enumerate() {
            for (acc, q) in slow.iter_mut().zip(posterior(x0, xt, t, &s, &prior).unwrap()) {
                *acc += p * q;
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn return_is_terminal_reward(chain in prop::collection::vec(graph_strategy(2, 3, 9), 2..6), r in -5.0f64..5.0) {
        let steps = transitions(&chain, r).unwrap();
        prop_assert_eq!(steps.len(), chain.len() - 1);
        prop_assert_eq!(trajectory_return(&steps).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reward_is_utility_minus_penalty(g in graph_strategy(2, 8, 100), seed in 0u64..1000) {
        let env = RunConfig::desk().environment().unwrap();
        let s = reward(&g, &env, seed, RewardMode::Surrogate).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.coverage));
        prop_assert!(s.sum_rate >= 0.0 && s.utility >= 0.0);
        let penalty = env.weights.penalty(&s.audit);
        prop_assert!((s.reward - (s.utility - penalty)).abs() < 1e-12);
        prop_assert_eq!(s.feasible(), s.audit.indicators() == [0; 4]);
    }
}
