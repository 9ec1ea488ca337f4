//! Successive convex approximation of the joint beamforming and common-rate
//! problem for a fixed placement and association.
//!
//! Internally everything is normalized: precoders by `sqrt(P_max)`, channels
//! by `sqrt(P_max / sigma^2)`, so the noise power is 1 and the power budget
//! of each AeBS is the unit ball. SINRs are unchanged by this scaling.
//!
//! Each round solves one conic program jointly over all AeBSs. The
//! out-of-cell interference at a GU is a convex quadratic in the other
//! AeBSs' precoders, so it enters the interference caps exactly and the
//! program stays convex without freezing any block.

mod conic;

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use conic::{
    solve_conic, AffineExpr, Cone, ConicProgram, ConicSolution, ConstraintBlock, Family,
};

use crate::channel::ChannelRealization;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::Association;
use crate::rates::{allocate_common_split, fbl_rate, fbl_rate_raw, inner, q_inv, AebsResources, ResourceSolution};

/// Smallest SINR used as a Taylor expansion point of the rate bound.
pub const NU_FLOOR: f64 = 1e-6;

/// Smallest starting common rate (bit/s/Hz) for which a common stream is kept.
const COMMON_MARGIN: f64 = 1e-6;

/// Whether AeBSs may use a common stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessScheme {
    #[default]
    Rsma,
    /// Private streams only.
    Sdma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaOptions {
    /// Stop when the objective moves by less than this.
    pub tau: f64,
    pub max_iters: usize,
    /// Feasibility and gap tolerance handed to the conic solver.
    pub solver_tol: f64,
    pub scheme: AccessScheme,
}

impl Default for ScaOptions {
    fn default() -> Self {
        ScaOptions {
            tau: 1e-5,
            max_iters: 100,
            solver_tol: 1e-7,
            scheme: AccessScheme::Rsma,
        }
    }
}

/// Iterate of the SCA loop, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaState {
    pub iteration: usize,
    /// Served GUs per AeBS.
    pub served: Vec<Vec<usize>>,
    pub common_active: Vec<bool>,
    /// `[k][column]`, column 0 is the common precoder (zero when inactive).
    pub precoders: Vec<Vec<Vec<Complex64>>>,
    /// SINR floors of the common stream, `[k][slot]`.
    pub nu_c: Vec<Vec<f64>>,
    /// SINR floors of the private streams.
    pub nu_p: Vec<Vec<f64>>,
    /// Interference-plus-noise caps of the common stream.
    pub chi_c: Vec<Vec<f64>>,
    /// Interference-plus-noise caps of the private streams.
    pub chi_p: Vec<Vec<f64>>,
    pub r_common: Vec<Vec<f64>>,
    /// Private-rate floors.
    pub phi: Vec<Vec<f64>>,
    /// Sum of common splits and private-rate floors.
    pub rho: f64,
    /// Dispersion constant Q^-1(eps) log2(e) / sqrt(D) of the common stream.
    pub y_common: f64,
    pub y_private: f64,
    /// Rate floor in force, if any.
    pub r_min: Option<f64>,
}

impl ScaState {
    /// Precoders and splits in physical units.
    pub fn to_solution(&self, cfg: &NetworkConfig) -> ResourceSolution {
        let amp = cfg.p_max_w.sqrt();
        ResourceSolution {
            aebs: (0..self.served.len())
                .map(|k| AebsResources {
                    served: self.served[k].clone(),
                    precoders: self.precoders[k]
                        .iter()
                        .map(|c| c.iter().map(|x| x * amp).collect())
                        .collect(),
                    common_split: self.r_common[k].iter().map(|r| r.max(0.0)).collect(),
                })
                .collect(),
        }
    }
}

/// Channels scaled so that the noise power is one and `P_max` is one.
pub fn normalized_channels(channels: &ChannelRealization, cfg: &NetworkConfig) -> ChannelRealization {
    channels.scaled((cfg.p_max_w / cfg.noise_w).sqrt())
}

/// Received powers at GU `n` (served by `k`, slot `slot`) under normalized
/// precoders: (common signal, own private, other in-cell private, out-of-cell).
fn received_powers(
    hn: &ChannelRealization,
    precoders: &[Vec<Vec<Complex64>>],
    k: usize,
    slot: usize,
    n: usize,
) -> (f64, f64, f64, f64) {
    let h = hn.vector(k, n);
    let cols = &precoders[k];
    let common = inner(h, &cols[0]).norm_sqr();
    let own = inner(h, &cols[slot + 1]).norm_sqr();
    let others: f64 = cols[1..]
        .iter()
        .enumerate()
        .filter(|&(s, _)| s != slot)
        .map(|(_, p)| inner(h, p).norm_sqr())
        .sum();
    let out: f64 = (0..precoders.len())
        .filter(|&i| i != k)
        .map(|i| {
            let hi = hn.vector(i, n);
            precoders[i].iter().map(|p| inner(hi, p).norm_sqr()).sum::<f64>()
        })
        .sum();
    (common, own, others, out)
}

/// Dominant eigenvector of `sum_n h_n h_n^H`, by power iteration.
fn dominant_direction(hs: &[&[Complex64]]) -> Vec<Complex64> {
    let nt = hs[0].len();
    let apply = |v: &[Complex64]| {
        let mut out = vec![Complex64::new(0.0, 0.0); nt];
        for h in hs {
            let c = inner(h, v);
            for (o, hj) in out.iter_mut().zip(h.iter()) {
                *o += hj * c;
            }
        }
        out
    };
    // start from the sum of the unit channel directions so that symmetric
    // clusters get a direction that reaches every GU
    let mut start = vec![Complex64::new(0.0, 0.0); nt];
    for h in hs {
        for (s, x) in start.iter_mut().zip(unit(h)) {
            *s += x;
        }
    }
    if norm(&start) == 0.0 {
        start = hs
            .iter()
            .max_by(|a, b| norm(a).total_cmp(&norm(b)))
            .expect("nonempty")
            .to_vec();
    }
    let mut v = unit(&start);
    if norm(&v) == 0.0 {
        v[0] = Complex64::new(1.0, 0.0);
        return v;
    }
    for _ in 0..200 {
        let w = apply(&v);
        if norm(&w) == 0.0 {
            break;
        }
        v = unit(&w);
    }
    v
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
}

fn unit(v: &[Complex64]) -> Vec<Complex64> {
    let n = norm(v);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn compose(
    hn: &ChannelRealization,
    served: &[Vec<usize>],
    active: &[bool],
    k: usize,
) -> Vec<Vec<Complex64>> {
    let nt = hn.antennas;
    let zero = vec![Complex64::new(0.0, 0.0); nt];
    let cluster = &served[k];
    if cluster.is_empty() {
        return vec![zero];
    }
    let m = cluster.len() as f64;
    let hs: Vec<&[Complex64]> = cluster.iter().map(|&n| hn.vector(k, n)).collect();
    let (common_power, private_power): (f64, f64) = if active[k] { (0.5, 0.5 / m) } else { (0.0, 1.0 / m) };
    let mut cols = Vec::with_capacity(cluster.len() + 1);
    if active[k] {
        cols.push(dominant_direction(&hs).iter().map(|x| x * common_power.sqrt()).collect());
    } else {
        cols.push(zero.clone());
    }
    for h in &hs {
        let mut dir = unit(h);
        if norm(&dir) == 0.0 {
            dir = zero.clone();
            dir[0] = Complex64::new(1.0, 0.0);
        }
        cols.push(dir.iter().map(|x| x * private_power.sqrt()).collect());
    }
    cols
}

fn check_shapes(assoc: &Association, channels: &ChannelRealization, cfg: &NetworkConfig) -> Result<()> {
    if channels.num_aebs != assoc.num_aebs() || channels.num_gus != assoc.num_gus() {
        return Err(Error::Shape("channels and association disagree".into()));
    }
    if channels.antennas != cfg.antennas {
        return Err(Error::Shape("channel length differs from the antenna count".into()));
    }
    Ok(())
}

/// Feasible starting point.
///
/// Private precoders are matched filters, the common precoder points along
/// the dominant direction of the served channels, and the budget is split
/// half common, half private (equally). An AeBS keeps its common stream
/// only if every served GU can decode it at a nonnegative finite-blocklength
/// rate from this start; otherwise all its power goes to private streams.
/// Slacks are set to the SINRs and interference levels the precoders induce.
pub fn initialize(
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
    scheme: AccessScheme,
) -> Result<ScaState> {
    check_shapes(assoc, channels, cfg)?;
    let hn = normalized_channels(channels, cfg);
    let k_count = assoc.num_aebs();
    let served: Vec<Vec<usize>> = (0..k_count).map(|k| assoc.cluster(k)).collect();
    let dc = cfg.blocklength_common as f64;
    let dp = cfg.blocklength_private as f64;
    let eps = cfg.decoding_error;

    let mut active: Vec<bool> = served
        .iter()
        .map(|s| scheme == AccessScheme::Rsma && !s.is_empty())
        .collect();
    let mut precoders: Vec<_> = (0..k_count).map(|k| compose(&hn, &served, &active, k)).collect();
    // Dropping one common stream changes the interference elsewhere, so
    // repeat until the active set is stable.
    loop {
        let mut changed = false;
        for k in 0..k_count {
            if !active[k] {
                continue;
            }
            let decodable = served[k].iter().enumerate().all(|(slot, &n)| {
                let (c, _, _, out) = received_powers(&hn, &precoders, k, slot, n);
                let intra: f64 = (0..served[k].len())
                    .map(|s| inner(hn.vector(k, n), &precoders[k][s + 1]).norm_sqr())
                    .sum();
                let gamma = c / (intra + out + 1.0);
                gamma >= NU_FLOOR && fbl_rate_raw(gamma, dc, eps) > COMMON_MARGIN
            });
            if !decodable {
                active[k] = false;
                changed = true;
            }
        }
        precoders = (0..k_count).map(|k| compose(&hn, &served, &active, k)).collect();
        if !changed {
            break;
        }
    }

    let mut state = ScaState {
        iteration: 0,
        served: served.clone(),
        common_active: active,
        precoders,
        nu_c: Vec::new(),
        nu_p: Vec::new(),
        chi_c: Vec::new(),
        chi_p: Vec::new(),
        r_common: Vec::new(),
        phi: Vec::new(),
        rho: 0.0,
        y_common: q_inv(eps) * std::f64::consts::LOG2_E / dc.sqrt(),
        y_private: q_inv(eps) * std::f64::consts::LOG2_E / dp.sqrt(),
        r_min: Some(cfg.r_min),
    };
    for k in 0..k_count {
        let mut row = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for (slot, &n) in served[k].iter().enumerate() {
            let (c, own, others, out) = received_powers(&hn, &state.precoders, k, slot, n);
            let chi_c = own + others + out + 1.0;
            let chi_p = others + out + 1.0;
            row[0].push(c / chi_c);
            row[1].push(own / chi_p);
            row[2].push(chi_c);
            row[3].push(chi_p);
            row[4].push(fbl_rate_raw(own / chi_p, dp, eps));
        }
        let [nu_c, nu_p, chi_c, chi_p, phi] = row;
        let private: Vec<f64> = nu_p.iter().map(|&g| fbl_rate(g, dp, eps)).collect();
        let split = if state.common_active[k] {
            let cap = nu_c
                .iter()
                .map(|&g| fbl_rate(g, dc, eps))
                .fold(f64::INFINITY, f64::min);
            allocate_common_split(cap, &private, cfg.r_min)
        } else {
            vec![0.0; served[k].len()]
        };
        state.nu_c.push(nu_c);
        state.nu_p.push(nu_p);
        state.chi_c.push(chi_c);
        state.chi_p.push(chi_p);
        state.r_common.push(split);
        state.phi.push(phi);
    }
    state.rho = objective_of(&state);
    Ok(state)
}

fn objective_of(state: &ScaState) -> f64 {
    let mut rho = 0.0;
    for k in 0..state.served.len() {
        for slot in 0..state.served[k].len() {
            rho += state.r_common[k][slot] + state.phi[k][slot];
        }
    }
    rho
}

/// Variable indices of one served GU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuVars {
    pub aebs: usize,
    pub gu: usize,
    pub slot: usize,
    pub r_common: Option<usize>,
    pub phi: usize,
    pub nu_c: Option<usize>,
    pub nu_p: usize,
    pub chi_c: Option<usize>,
    pub chi_p: usize,
    pub t_c: Option<usize>,
    pub t_p: usize,
}

/// Where each decision variable lives in the stacked real vector.
///
/// A precoder column starting at `s` stores real parts at `s..s+Nt` and
/// imaginary parts at `s+Nt..s+2Nt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub antennas: usize,
    /// `[k][column]` start index; `None` for an inactive common column.
    pub columns: Vec<Vec<Option<usize>>>,
    /// `[k][slot]`.
    pub gus: Vec<Vec<GuVars>>,
}

/// The convex program of one SCA round.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSubproblem {
    pub program: ConicProgram,
    pub layout: Layout,
}

impl ConvexSubproblem {
    /// Constraint count excluding auxiliary cones and sign bounds.
    pub fn constraint_count(&self) -> usize {
        self.program.constraint_count()
    }

    /// Stacks a state's own variables into a point of this program.
    pub fn point_of(&self, state: &ScaState) -> Vec<f64> {
        let mut x = vec![0.0; self.program.num_vars];
        let nt = self.layout.antennas;
        for (k, cols) in self.layout.columns.iter().enumerate() {
            for (c, start) in cols.iter().enumerate() {
                if let Some(s) = *start {
                    for (j, v) in state.precoders[k][c].iter().enumerate() {
                        x[s + j] = v.re;
                        x[s + nt + j] = v.im;
                    }
                }
            }
        }
        for (k, gus) in self.layout.gus.iter().enumerate() {
            for g in gus {
                let s = g.slot;
                if let Some(i) = g.r_common {
                    x[i] = state.r_common[k][s];
                }
                x[g.phi] = state.phi[k][s];
                x[g.nu_p] = state.nu_p[k][s];
                x[g.chi_p] = state.chi_p[k][s];
                x[g.t_p] = (1.0 + state.nu_p[k][s]).ln();
                if let (Some(nu), Some(chi), Some(t)) = (g.nu_c, g.chi_c, g.t_c) {
                    x[nu] = state.nu_c[k][s];
                    x[chi] = state.chi_c[k][s];
                    x[t] = (1.0 + state.nu_c[k][s]).ln();
                }
            }
        }
        x
    }
}

/// Re and Im of h^H p as affine expressions of the column at `start`.
fn inner_rows(h: &[Complex64], start: usize) -> (AffineExpr, AffineExpr) {
    let nt = h.len();
    let mut re = AffineExpr::constant(0.0);
    let mut im = AffineExpr::constant(0.0);
    for (j, hj) in h.iter().enumerate() {
        re.add_term(start + j, hj.re).add_term(start + nt + j, hj.im);
        im.add_term(start + nt + j, hj.re).add_term(start + j, -hj.im);
    }
    (re, im)
}

/// First-order upper model of sqrt(1 - (1+nu)^-2) around `nu0`, as
/// (slope, intercept).
fn dispersion_tangent(nu0: f64) -> (f64, f64) {
    let b = 1.0 + nu0;
    let d2 = b.powi(-2);
    let d3 = b.powi(-3);
    let a = 1.0 / (1.0 - d2).sqrt();
    (a * d3, a * (1.0 - d2 - d3 * nu0))
}

/// Linear model of the finite-blocklength rate at `nu` given the log
/// epigraph variable `t` (t <= ln(1+nu)), expanded around `nu0`.
fn rate_model(t: usize, nu: usize, nu0: f64, y: f64) -> AffineExpr {
    let (slope, intercept) = dispersion_tangent(nu0.max(NU_FLOOR));
    let mut e = AffineExpr::constant(-y * intercept);
    e.add_term(t, std::f64::consts::LOG2_E).add_term(nu, -y * slope);
    e
}

/// Lower model 2 Re(conj(a0) a) / chi0 - |a0|^2 chi / chi0^2 - nu >= 0 of
/// the quadratic-over-linear SINR constraint.
fn sinr_model(h: &[Complex64], start: usize, a0: Complex64, chi: usize, chi0: f64, nu: usize) -> AffineExpr {
    let (re, im) = inner_rows(h, start);
    let mut e = AffineExpr::constant(0.0);
    e.add_scaled(&re, 2.0 * a0.re / chi0)
        .add_scaled(&im, 2.0 * a0.im / chi0)
        .add_term(chi, -a0.norm_sqr() / (chi0 * chi0))
        .add_term(nu, -1.0);
    e
}

/// SOC form of chi >= 1 + sum_s |w_s|^2: `|(2 w, chi - 2)| <= chi`.
fn interference_cap(chi: usize, streams: &[(AffineExpr, AffineExpr)]) -> Vec<AffineExpr> {
    let mut rows = vec![AffineExpr::var(chi)];
    for (re, im) in streams {
        rows.push(re.scaled(2.0));
        rows.push(im.scaled(2.0));
    }
    let mut last = AffineExpr::var(chi);
    last.constant = -2.0;
    rows.push(last);
    rows
}

/// Builds the convex inner approximation around `state`.
pub fn build_subproblem(
    state: &ScaState,
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
) -> Result<ConvexSubproblem> {
    check_shapes(assoc, channels, cfg)?;
    if (0..assoc.num_aebs()).any(|k| assoc.cluster(k) != state.served[k]) {
        return Err(Error::Shape("state was built for a different association".into()));
    }
    let hn = normalized_channels(channels, cfg);
    let nt = cfg.antennas;
    let k_count = state.served.len();

    let mut next = 0usize;
    let mut alloc = |n: usize| {
        let s = next;
        next += n;
        s
    };
    let mut columns = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut cols = vec![state.common_active[k].then(|| alloc(2 * nt))];
        for _ in &state.served[k] {
            cols.push(Some(alloc(2 * nt)));
        }
        columns.push(cols);
    }
    let mut gus = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let active = state.common_active[k];
        let mut row = Vec::new();
        for (slot, &n) in state.served[k].iter().enumerate() {
            row.push(GuVars {
                aebs: k,
                gu: n,
                slot,
                r_common: active.then(|| alloc(1)),
                phi: alloc(1),
                nu_c: active.then(|| alloc(1)),
                nu_p: alloc(1),
                chi_c: active.then(|| alloc(1)),
                chi_p: alloc(1),
                t_c: active.then(|| alloc(1)),
                t_p: alloc(1),
            });
        }
        gus.push(row);
    }
    let layout = Layout {
        antennas: nt,
        columns,
        gus,
    };
    let mut program = ConicProgram::new(next);
    for (k, gus) in layout.gus.iter().enumerate() {
        for g in gus {
            let s = g.slot;
            program.scale[g.nu_p] = state.nu_p[k][s].max(1.0);
            program.scale[g.chi_p] = state.chi_p[k][s].max(1.0);
            if let (Some(nu), Some(chi)) = (g.nu_c, g.chi_c) {
                program.scale[nu] = state.nu_c[k][s].max(1.0);
                program.scale[chi] = state.chi_c[k][s].max(1.0);
            }
        }
    }

    for k in 0..k_count {
        for g in &layout.gus[k] {
            let n = g.gu;
            let s = g.slot;
            let h = hn.vector(k, n);

            // streams of other AeBSs reaching GU n
            let mut out_streams = Vec::new();
            for i in (0..k_count).filter(|&i| i != k) {
                let hi = hn.vector(i, n);
                for start in layout.columns[i].iter().flatten() {
                    out_streams.push(inner_rows(hi, *start));
                }
            }
            let private_streams = |skip: Option<usize>| {
                let mut v: Vec<_> = layout.columns[k][1..]
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| Some(j) != skip)
                    .map(|(_, st)| inner_rows(h, st.expect("private columns always exist")))
                    .collect();
                v.extend(out_streams.iter().cloned());
                v
            };

            if let (Some(rc), Some(nu_c), Some(chi_c), Some(t_c)) = (g.r_common, g.nu_c, g.chi_c, g.t_c) {
                let mut rate = rate_model(t_c, nu_c, state.nu_c[k][s], state.y_common);
                for other in &layout.gus[k] {
                    rate.add_term(other.r_common.expect("active AeBS"), -1.0);
                }
                program.push(Family::RateCommon, n, Cone::Nonneg, vec![rate]);
                program.push(Family::Auxiliary, n, Cone::Exponential, log_epigraph(t_c, nu_c));

                let a0 = inner(h, &state.precoders[k][0]);
                let start = layout.columns[k][0].expect("active AeBS");
                program.push(
                    Family::SinrCommon,
                    n,
                    Cone::Nonneg,
                    vec![sinr_model(h, start, a0, chi_c, state.chi_c[k][s], nu_c)],
                );
                program.push(
                    Family::InterferenceCommon,
                    n,
                    Cone::SecondOrder,
                    interference_cap(chi_c, &private_streams(None)),
                );
                program.push(Family::CommonNonneg, n, Cone::Nonneg, vec![AffineExpr::var(rc)]);
                program.push(Family::Auxiliary, n, Cone::Nonneg, vec![AffineExpr::var(nu_c)]);
            }

            let mut rate = rate_model(g.t_p, g.nu_p, state.nu_p[k][s], state.y_private);
            rate.add_term(g.phi, -1.0);
            program.push(Family::RatePrivate, n, Cone::Nonneg, vec![rate]);
            program.push(Family::Auxiliary, n, Cone::Exponential, log_epigraph(g.t_p, g.nu_p));

            let a0 = inner(h, &state.precoders[k][s + 1]);
            let start = layout.columns[k][s + 1].expect("private column");
            program.push(
                Family::SinrPrivate,
                n,
                Cone::Nonneg,
                vec![sinr_model(h, start, a0, g.chi_p, state.chi_p[k][s], g.nu_p)],
            );
            program.push(
                Family::InterferencePrivate,
                n,
                Cone::SecondOrder,
                interference_cap(g.chi_p, &private_streams(Some(s))),
            );
            program.push(Family::Auxiliary, n, Cone::Nonneg, vec![AffineExpr::var(g.nu_p)]);

            if let Some(r_min) = state.r_min {
                let mut floor = AffineExpr::constant(-r_min);
                floor.add_term(g.phi, 1.0);
                if let Some(rc) = g.r_common {
                    floor.add_term(rc, 1.0);
                }
                program.push(Family::RateFloor, n, Cone::Nonneg, vec![floor]);
            }

            if let Some(rc) = g.r_common {
                program.objective.push((rc, 1.0));
            }
            program.objective.push((g.phi, 1.0));
        }

        let starts: Vec<usize> = layout.columns[k].iter().flatten().copied().collect();
        if !state.served[k].is_empty() {
            let mut rows = vec![AffineExpr::constant(1.0)];
            for st in starts {
                for j in 0..2 * nt {
                    rows.push(AffineExpr::var(st + j));
                }
            }
            program.push(Family::Power, k, Cone::SecondOrder, rows);
        }
    }
    Ok(ConvexSubproblem { program, layout })
}

/// `(t, 1, 1 + nu)` in the exponential cone, i.e. t <= ln(1 + nu).
fn log_epigraph(t: usize, nu: usize) -> Vec<AffineExpr> {
    let mut z = AffineExpr::constant(1.0);
    z.add_term(nu, 1.0);
    vec![AffineExpr::var(t), AffineExpr::constant(1.0), z]
}

/// Solves one subproblem; see [`solve_conic`].
///
/// Interior-point runs that stall short of `tol` are retried at looser
/// tolerances before giving up.
pub fn solve_subproblem(sub: &ConvexSubproblem, tol: f64) -> Result<ConicSolution> {
    let mut result = solve_conic(&sub.program, tol);
    for loosen in [10.0, 100.0] {
        match result {
            Err(Error::SolverFailure(_)) => result = solve_conic(&sub.program, tol * loosen),
            _ => break,
        }
    }
    result
}

/// Reads the next iterate out of a subproblem solution.
pub fn next_state(state: &ScaState, sub: &ConvexSubproblem, sol: &ConicSolution) -> ScaState {
    let x = &sol.x;
    let nt = sub.layout.antennas;
    let mut next = state.clone();
    next.iteration += 1;
    for (k, cols) in sub.layout.columns.iter().enumerate() {
        for (c, start) in cols.iter().enumerate() {
            next.precoders[k][c] = match *start {
                Some(s) => (0..nt).map(|j| Complex64::new(x[s + j], x[s + nt + j])).collect(),
                None => vec![Complex64::new(0.0, 0.0); nt],
            };
        }
    }
    for (k, gus) in sub.layout.gus.iter().enumerate() {
        for g in gus {
            let s = g.slot;
            next.phi[k][s] = x[g.phi];
            next.nu_p[k][s] = x[g.nu_p].max(0.0);
            next.chi_p[k][s] = x[g.chi_p];
            if let (Some(rc), Some(nu), Some(chi)) = (g.r_common, g.nu_c, g.chi_c) {
                next.r_common[k][s] = x[rc];
                next.nu_c[k][s] = x[nu].max(0.0);
                next.chi_c[k][s] = x[chi];
            }
        }
    }
    next.rho = sol.objective;
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Objective of the accepted iterate after this round.
    pub rho: f64,
    /// Objective the solver returned this round.
    pub raw_rho: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaOutcome {
    pub solution: ResourceSolution,
    pub rho: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Rate floor the returned solution was optimized under.
    pub r_min_used: Option<f64>,
    pub state: ScaState,
}

/// Iterates from `state` until the objective settles.
///
/// A round whose objective falls below the accepted one (solver noise near
/// the fixed point) is not accepted and ends the loop, so the accepted
/// objective sequence never decreases.
pub fn iterate(
    mut state: ScaState,
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
    opts: &ScaOptions,
) -> Result<ScaOutcome> {
    let mut trace = Vec::new();
    let mut previous = f64::NEG_INFINITY;
    let mut converged = false;
    for round in 1..=opts.max_iters {
        let sub = build_subproblem(&state, assoc, channels, cfg)?;
        let sol = match solve_subproblem(&sub, opts.solver_tol) {
            Ok(sol) => sol,
            Err(e) if round == 1 => return Err(e),
            Err(_) => break,
        };
        let candidate = next_state(&state, &sub, &sol);
        if round > 1 && candidate.rho < state.rho {
            trace.push(TraceRow {
                iter: round,
                rho: state.rho,
                raw_rho: candidate.rho,
                max_residual: sol.max_violation,
            });
            converged = true;
            break;
        }
        trace.push(TraceRow {
            iter: round,
            rho: candidate.rho,
            raw_rho: candidate.rho,
            max_residual: sol.max_violation,
        });
        let delta = (candidate.rho - previous).abs();
        previous = candidate.rho;
        state = candidate;
        if delta < opts.tau {
            converged = true;
            break;
        }
    }
    Ok(ScaOutcome {
        solution: state.to_solution(cfg),
        rho: state.rho,
        trace,
        converged,
        r_min_used: state.r_min,
        state,
    })
}

fn ladder_level(level: Option<f64>, r_min: f64) -> u8 {
    match level {
        Some(r) if r >= r_min => 2,
        Some(_) => 1,
        None => 0,
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::SubproblemInfeasible | Error::SolverFailure(_))
}

/// SCA from one start with the rate-floor relaxation ladder.
///
/// The floor as configured is tried first. If the first convex model is
/// already infeasible, the floor-free problem is solved and used as a warm
/// start for the configured floor, then for half of it; if neither holds,
/// the floor-free result is returned.
fn run_from(
    start: ScaState,
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
    opts: &ScaOptions,
) -> Result<ScaOutcome> {
    let attempt = |state: &ScaState, level: Option<f64>| {
        let mut s = state.clone();
        s.r_min = level;
        iterate(s, assoc, channels, cfg, opts)
    };
    match attempt(&start, Some(cfg.r_min)) {
        Ok(out) => return Ok(out),
        Err(e) if recoverable(&e) => {}
        Err(e) => return Err(e),
    }
    let free = attempt(&start, None)?;
    for level in [cfg.r_min, cfg.r_min * 0.5] {
        match attempt(&free.state, Some(level)) {
            Ok(out) => return Ok(out),
            Err(e) if recoverable(&e) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(free)
}

/// Full SCA: initialize, iterate to convergence, relax the rate floor if
/// it cannot be met.
///
/// Under RSMA two starts are run, one with common streams and one with
/// private streams only, and the better result is kept (a higher honoured
/// rate floor first, then the objective). The private-only start is a
/// feasible point of the RSMA problem, so RSMA never ends below what the
/// same loop reaches without common streams.
pub fn run_sca(
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
    opts: &ScaOptions,
) -> Result<ScaOutcome> {
    let start = initialize(assoc, channels, cfg, opts.scheme)?;
    if assoc.total_links() == 0 {
        // nobody to serve: nothing to optimize
        return Ok(ScaOutcome {
            solution: ResourceSolution::zeros(assoc, channels.antennas),
            rho: 0.0,
            trace: Vec::new(),
            converged: true,
            r_min_used: Some(cfg.r_min),
            state: start,
        });
    }
    let with_common = start.common_active.iter().any(|&a| a);
    let first = run_from(start, assoc, channels, cfg, opts);
    if !with_common {
        return first;
    }
    let private_only = initialize(assoc, channels, cfg, AccessScheme::Sdma)?;
    let second = run_from(private_only, assoc, channels, cfg, opts);
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let key = |o: &ScaOutcome| (ladder_level(o.r_min_used, cfg.r_min), o.rho);
            let (ka, kb) = (key(&a), key(&b));
            if kb.0 > ka.0 || (kb.0 == ka.0 && kb.1 > ka.1) {
                Ok(b)
            } else {
                Ok(a)
            }
        }
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(b)) => Ok(b),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Matched-filter precoders with the induced common split; no optimization.
pub fn matched_filter_solution(
    assoc: &Association,
    channels: &ChannelRealization,
    cfg: &NetworkConfig,
    scheme: AccessScheme,
) -> Result<ResourceSolution> {
    Ok(initialize(assoc, channels, cfg, scheme)?.to_solution(cfg))
}

/// Writes `iter,rho,raw_rho,max_residual` rows.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests;
