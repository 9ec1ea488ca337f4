use super::*;
use crate::model::Association;
use crate::rates::{rate_report, sinr_common, sinr_private};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn unit_cfg(k: usize, n: usize) -> NetworkConfig {
    let mut cfg = NetworkConfig::reference(k, n);
    cfg.antennas = 2;
    cfg.noise_w = 1.0;
    cfg.p_max_w = 10.0;
    cfg.r_min = 0.5;
    cfg
}

/// K = 2, N = 4, Nt = 2 with moderate cross interference.
fn two_cell() -> (Association, ChannelRealization, NetworkConfig) {
    let h = vec![
        vec![
            vec![c(1.0, 0.2), c(0.3, -0.4)],
            vec![c(0.2, 0.9), c(-0.7, 0.1)],
            vec![c(0.2, -0.1), c(0.1, 0.15)],
            vec![c(-0.1, 0.05), c(0.2, 0.1)],
        ],
        vec![
            vec![c(0.1, 0.1), c(-0.2, 0.05)],
            vec![c(0.15, -0.1), c(0.05, 0.2)],
            vec![c(0.8, -0.3), c(0.4, 0.6)],
            vec![c(-0.5, 0.5), c(0.9, 0.2)],
        ],
    ];
    let ch = ChannelRealization::from_vectors(h).unwrap();
    let assoc = Association::from_serving(2, &[Some(0), Some(0), Some(1), Some(1)]).unwrap();
    (assoc, ch, unit_cfg(2, 4))
}

#[test]
fn start_uses_full_budget_split_in_half() {
    let mut cfg = unit_cfg(1, 2);
    cfg.p_max_w = 2.0;
    let ch = ChannelRealization::from_vectors(vec![vec![
        vec![c(1.0, 0.0), c(0.0, 0.0)],
        vec![c(0.0, 0.0), c(1.0, 0.0)],
    ]])
    .unwrap();
    let assoc = Association::from_serving(1, &[Some(0), Some(0)]).unwrap();
    let state = initialize(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    assert!(state.common_active[0]);
    let sol = state.to_solution(&cfg);
    let p = &sol.aebs[0];
    assert!((p.common_power() - 1.0).abs() < 1e-12);
    for col in &p.precoders[1..] {
        let pw: f64 = col.iter().map(|x| x.norm_sqr()).sum();
        assert!((pw - 0.5).abs() < 1e-12);
    }
    assert!((p.power() - 2.0).abs() < 1e-12);
}

#[test]
fn start_spends_exactly_the_budget() {
    let (assoc, ch, cfg) = two_cell();
    for scheme in [AccessScheme::Rsma, AccessScheme::Sdma] {
        let sol = matched_filter_solution(&assoc, &ch, &cfg, scheme).unwrap();
        for block in &sol.aebs {
            assert!((block.power() - cfg.p_max_w).abs() < 1e-9);
        }
    }
}

#[test]
fn induced_slacks_satisfy_the_nonconvex_program() {
    let (assoc, ch, cfg) = two_cell();
    let state = initialize(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    let sol = state.to_solution(&cfg);
    let dc = cfg.blocklength_common as f64;
    let dp = cfg.blocklength_private as f64;
    for k in 0..2 {
        let mut common_sum = 0.0;
        for (s, &n) in state.served[k].iter().enumerate() {
            let gc = sinr_common(k, n, &assoc, &ch, &sol, &cfg).unwrap();
            let gp = sinr_private(k, n, &assoc, &ch, &sol, &cfg).unwrap();
            assert!(state.nu_p[k][s] <= gp * (1.0 + 1e-12));
            assert!(state.phi[k][s] <= fbl_rate_raw(gp, dp, cfg.decoding_error) + 1e-12);
            if state.common_active[k] {
                assert!(state.nu_c[k][s] <= gc * (1.0 + 1e-12));
            }
            common_sum += state.r_common[k][s];
        }
        for &n in &state.served[k] {
            let gc = sinr_common(k, n, &assoc, &ch, &sol, &cfg).unwrap();
            assert!(common_sum <= fbl_rate(gc, dc, cfg.decoding_error) + 1e-12);
        }
    }
}

#[test]
fn models_are_tight_at_the_expansion_point() {
    let (assoc, ch, cfg) = two_cell();
    let state = initialize(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    let sub = build_subproblem(&state, &assoc, &ch, &cfg).unwrap();
    let x = sub.point_of(&state);
    for block in &sub.program.blocks {
        if block.family == Family::RateFloor {
            continue;
        }
        let scale = block.rows.iter().map(|r| r.eval(&x).abs()).fold(1.0, f64::max);
        assert!(block.violation(&x) <= 1e-9 * scale, "{:?} {}", block.family, block.violation(&x));
    }
    // the SINR and private-rate models hold with equality
    for block in &sub.program.blocks {
        if matches!(block.family, Family::SinrCommon | Family::SinrPrivate | Family::RatePrivate) {
            assert!(block.rows[0].eval(&x).abs() < 1e-9, "{:?}", block.family);
        }
    }
}

#[test]
fn dispersion_tangent_exact_at_base() {
    let (slope, intercept) = dispersion_tangent(1.0);
    assert!((slope + intercept - 0.75f64.sqrt()).abs() < 1e-15);
    // log2(1 + nu) at nu = 1 through the epigraph variable t = ln 2
    let e = rate_model(0, 1, 1.0, 0.0);
    assert!((e.eval(&[2f64.ln(), 1.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn constraint_count_matches_k_plus_8n() {
    let (assoc, ch, cfg) = two_cell();
    let state = initialize(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    assert!(state.common_active.iter().all(|&a| a));
    let sub = build_subproblem(&state, &assoc, &ch, &cfg).unwrap();
    assert_eq!(sub.constraint_count(), 2 + 8 * 4);
    for family in [
        Family::RateCommon,
        Family::RatePrivate,
        Family::SinrCommon,
        Family::SinrPrivate,
        Family::InterferenceCommon,
        Family::InterferencePrivate,
        Family::RateFloor,
        Family::CommonNonneg,
    ] {
        assert_eq!(sub.program.count_of(family), 4, "{family:?}");
    }
}

#[test]
fn unreachable_floor_is_infeasible() {
    let mut cfg = unit_cfg(1, 2);
    cfg.r_min = 10.0;
    let ch = ChannelRealization::from_vectors(vec![vec![
        vec![c(1.0, 0.0), c(0.0, 0.0)],
        vec![c(0.0, 0.0), c(1.0, 0.0)],
    ]])
    .unwrap();
    let assoc = Association::from_serving(1, &[Some(0), Some(0)]).unwrap();
    let state = initialize(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    let sub = build_subproblem(&state, &assoc, &ch, &cfg).unwrap();
    assert!(matches!(solve_subproblem(&sub, 1e-9), Err(Error::SubproblemInfeasible)));

    // the ladder ends without the floor and reports it
    let out = run_sca(&assoc, &ch, &cfg, &ScaOptions::default()).unwrap();
    assert_eq!(out.r_min_used, None);
    let report = rate_report(&assoc, &ch, &out.solution, &cfg).unwrap();
    assert!(!report.all_rmin_ok());
}

#[test]
fn run_is_monotone_feasible_and_a_fixed_point() {
    let (assoc, ch, cfg) = two_cell();
    let opts = ScaOptions::default();
    let out = run_sca(&assoc, &ch, &cfg, &opts).unwrap();
    assert!(out.converged);
    for w in out.trace.windows(2) {
        assert!(w[1].rho >= w[0].rho - 1e-7);
    }
    for row in &out.trace {
        assert!(row.raw_rho >= row.rho - 1e-6);
    }
    let report = rate_report(&assoc, &ch, &out.solution, &cfg).unwrap();
    assert!(report.resources_ok(), "{report:?}");
    // true rates are at least what the slacks promise
    for k in 0..2 {
        for (s, &n) in out.state.served[k].iter().enumerate() {
            assert!(report.gus[n].r_private >= out.state.phi[k][s] - 1e-6);
        }
    }
    assert!(report.sum_rate >= out.rho - 1e-6);

    let sub = build_subproblem(&out.state, &assoc, &ch, &cfg).unwrap();
    let again = solve_subproblem(&sub, opts.solver_tol).unwrap();
    assert!((again.objective - out.rho).abs() < 1e-4, "{} vs {}", again.objective, out.rho);
}

#[test]
fn sca_improves_on_matched_filter() {
    let (assoc, ch, cfg) = two_cell();
    let start = matched_filter_solution(&assoc, &ch, &cfg, AccessScheme::Rsma).unwrap();
    let start = rate_report(&assoc, &ch, &start, &cfg).unwrap();
    let out = run_sca(&assoc, &ch, &cfg, &ScaOptions::default()).unwrap();
    let end = rate_report(&assoc, &ch, &out.solution, &cfg).unwrap();
    assert!(end.sum_rate >= start.sum_rate - 1e-6, "{} < {}", end.sum_rate, start.sum_rate);
}

#[test]
fn sdma_run_keeps_common_silent() {
    let (assoc, ch, cfg) = two_cell();
    let opts = ScaOptions {
        scheme: AccessScheme::Sdma,
        ..ScaOptions::default()
    };
    let out = run_sca(&assoc, &ch, &cfg, &opts).unwrap();
    assert!(crate::rates::sdma_rate_report(&assoc, &ch, &out.solution, &cfg).is_ok());
}

#[test]
fn trace_csv_header() {
    let rows = [TraceRow {
        iter: 1,
        rho: 2.0,
        raw_rho: 2.0,
        max_residual: 0.0,
    }];
    let mut buf = Vec::new();
    write_trace_csv(&rows, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("iter,rho,raw_rho,max_residual\n"));
}

#[test]
fn empty_association_needs_no_solve() {
    let (_, ch, cfg) = two_cell();
    let assoc = Association::empty(2, 4);
    let out = run_sca(&assoc, &ch, &cfg, &ScaOptions::default()).unwrap();
    assert!(out.converged);
    assert_eq!(out.solution, ResourceSolution::zeros(&assoc, 2));
}
