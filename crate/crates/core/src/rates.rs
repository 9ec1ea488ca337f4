//! RSMA SINRs and finite-blocklength rates.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::{coverage, utility, Association};

/// Tolerance used for the C5, C7 and C8 flags of a [`RateReport`].
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Inverse Gaussian Q-function, Q^-1(eps) = sqrt(2) erfc^-1(2 eps).
pub fn q_inv(eps: f64) -> f64 {
    std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * eps)
}

/// Channel dispersion 1 - (1 + gamma)^-2.
pub fn dispersion(gamma: f64) -> f64 {
    1.0 - (1.0 + gamma).powi(-2)
}

/// Normal-approximation rate before clamping; negative for tiny SINRs.
pub fn fbl_rate_raw(gamma: f64, blocklength: f64, eps: f64) -> f64 {
    (1.0 + gamma).log2()
        - (dispersion(gamma) / blocklength).sqrt() * q_inv(eps) / std::f64::consts::LN_2
}

/// Finite-blocklength rate in bit/s/Hz, clamped at zero.
pub fn fbl_rate(gamma: f64, blocklength: f64, eps: f64) -> f64 {
    fbl_rate_raw(gamma, blocklength, eps).max(0.0)
}

/// h^H p.
pub fn inner(h: &[Complex64], p: &[Complex64]) -> Complex64 {
    h.iter().zip(p).map(|(h, p)| h.conj() * p).sum()
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum()
}

/// Precoders and common-rate split of one AeBS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AebsResources {
    /// Served GUs, ascending global indices.
    pub served: Vec<usize>,
    /// `served.len() + 1` columns of length Nt; column 0 is the common precoder.
    pub precoders: Vec<Vec<Complex64>>,
    /// r^c per served GU, aligned with `served`.
    pub common_split: Vec<f64>,
}

impl AebsResources {
    pub fn zeros(served: Vec<usize>, antennas: usize) -> Self {
        let cols = served.len() + 1;
        let split = vec![0.0; served.len()];
        AebsResources {
            served,
            precoders: vec![vec![Complex64::new(0.0, 0.0); antennas]; cols],
            common_split: split,
        }
    }

    pub fn common(&self) -> &[Complex64] {
        &self.precoders[0]
    }

    /// Private precoder of global GU `n`, if served here.
    pub fn private(&self, n: usize) -> Option<&[Complex64]> {
        self.slot(n).map(|i| self.precoders[i + 1].as_slice())
    }

    /// Position of GU `n` within `served`.
    pub fn slot(&self, n: usize) -> Option<usize> {
        self.served.iter().position(|&m| m == n)
    }

    /// Total transmit power, sum of squared column norms.
    pub fn power(&self) -> f64 {
        self.precoders.iter().map(|c| norm_sqr(c)).sum()
    }

    pub fn common_power(&self) -> f64 {
        norm_sqr(self.common())
    }
}

/// Per-AeBS precoders and common splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSolution {
    pub aebs: Vec<AebsResources>,
}

impl ResourceSolution {
    /// All-zero precoders sized for `assoc`.
    pub fn zeros(assoc: &Association, antennas: usize) -> Self {
        ResourceSolution {
            aebs: (0..assoc.num_aebs())
                .map(|k| AebsResources::zeros(assoc.cluster(k), antennas))
                .collect(),
        }
    }

    /// Checks that clusters and precoder shapes agree with `assoc`.
    pub fn check_shape(&self, assoc: &Association, antennas: usize) -> Result<()> {
        if self.aebs.len() != assoc.num_aebs() {
            return Err(Error::Shape(format!(
                "{} AeBS resource blocks for {} AeBSs",
                self.aebs.len(),
                assoc.num_aebs()
            )));
        }
        for (k, r) in self.aebs.iter().enumerate() {
            if r.served != assoc.cluster(k) {
                return Err(Error::Shape(format!("AeBS {k}: served set differs from association")));
            }
            if r.precoders.len() != r.served.len() + 1 || r.common_split.len() != r.served.len() {
                return Err(Error::Shape(format!("AeBS {k}: wrong number of precoder columns")));
            }
            if r.precoders.iter().any(|c| c.len() != antennas) {
                return Err(Error::Shape(format!("AeBS {k}: precoder length differs from Nt")));
            }
        }
        Ok(())
    }
}

/// Power the streams of AeBS `i` deliver to GU `n`, split into the common
/// part and the private part (excluding GU `skip`, if given).
fn received(
    i: usize,
    n: usize,
    skip: Option<usize>,
    channels: &ChannelRealization,
    res: &AebsResources,
) -> (f64, f64) {
    let h = channels.vector(i, n);
    let common = inner(h, res.common()).norm_sqr();
    let private = res
        .served
        .iter()
        .zip(&res.precoders[1..])
        .filter(|(&m, _)| Some(m) != skip)
        .map(|(_, p)| inner(h, p).norm_sqr())
        .sum();
    (common, private)
}

/// Interference from every AeBS other than `k` at GU `n`.
fn out_of_cell(k: usize, n: usize, channels: &ChannelRealization, sol: &ResourceSolution) -> f64 {
    sol.aebs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(i, r)| {
            let (c, p) = received(i, n, None, channels, r);
            c + p
        })
        .sum()
}

fn serving_block<'a>(
    k: usize,
    n: usize,
    assoc: &Association,
    sol: &'a ResourceSolution,
) -> Result<&'a AebsResources> {
    if k >= assoc.num_aebs() || n >= assoc.num_gus() || !assoc.get(k, n) {
        return Err(Error::Domain(format!("GU {n} is not served by AeBS {k}")));
    }
    let block = sol.aebs.get(k).ok_or_else(|| Error::Shape(format!("no resources for AeBS {k}")))?;
    if block.slot(n).is_none() {
        return Err(Error::Shape(format!("AeBS {k} has no precoder for GU {n}")));
    }
    Ok(block)
}

/// SINR of the common stream of AeBS `k` at its GU `n`.
pub fn sinr_common(
    k: usize,
    n: usize,
    assoc: &Association,
    channels: &ChannelRealization,
    sol: &ResourceSolution,
    cfg: &NetworkConfig,
) -> Result<f64> {
    let block = serving_block(k, n, assoc, sol)?;
    let (signal, intra) = received(k, n, None, channels, block);
    Ok(signal / (intra + out_of_cell(k, n, channels, sol) + cfg.noise_w))
}

/// SINR of the private stream of GU `n` after the common stream is removed.
pub fn sinr_private(
    k: usize,
    n: usize,
    assoc: &Association,
    channels: &ChannelRealization,
    sol: &ResourceSolution,
    cfg: &NetworkConfig,
) -> Result<f64> {
    let block = serving_block(k, n, assoc, sol)?;
    let own = block.private(n).expect("slot checked");
    let signal = inner(channels.vector(k, n), own).norm_sqr();
    let (_, intra) = received(k, n, Some(n), channels, block);
    Ok(signal / (intra + out_of_cell(k, n, channels, sol) + cfg.noise_w))
}

/// Rates of one GU. Unserved GUs carry zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuRate {
    pub gu: usize,
    pub aebs: Option<usize>,
    pub gamma_c: f64,
    pub gamma_p: f64,
    /// Common rate this GU could decode, c_{k,n}.
    pub c_common: f64,
    pub r_common: f64,
    pub r_private: f64,
    pub r_total: f64,
    pub rmin_ok: bool,
}

/// Rates, utility and resource-constraint flags of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub gus: Vec<GuRate>,
    /// min_n c_{k,n} per AeBS (0 for an idle AeBS).
    pub common_cap: Vec<f64>,
    /// Sum of allocated r^c per AeBS.
    pub common_alloc: Vec<f64>,
    pub power: Vec<f64>,
    pub c5_ok: Vec<bool>,
    pub c7_ok: bool,
    pub c8_ok: Vec<bool>,
    pub sum_rate: f64,
    pub coverage: f64,
    pub utility: f64,
}

impl RateReport {
    /// C5, C7 and C8 all hold.
    pub fn resources_ok(&self) -> bool {
        self.c7_ok && self.c5_ok.iter().all(|&b| b) && self.c8_ok.iter().all(|&b| b)
    }

    /// Every served GU meets the rate floor.
    pub fn all_rmin_ok(&self) -> bool {
        self.gus.iter().filter(|g| g.aebs.is_some()).all(|g| g.rmin_ok)
    }

    /// One row per GU.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "gu", "aebs", "gamma_c", "gamma_p", "c_common", "r_common", "r_private", "r_total",
            "rmin_ok",
        ])?;
        for g in &self.gus {
            let aebs = g.aebs.map(|k| k.to_string()).unwrap_or_default();
            w.write_record([
                g.gu.to_string(),
                aebs,
                g.gamma_c.to_string(),
                g.gamma_p.to_string(),
                g.c_common.to_string(),
                g.r_common.to_string(),
                g.r_private.to_string(),
                g.r_total.to_string(),
                g.rmin_ok.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Computes SINRs, FBL rates, sum rate, coverage, utility and flags.
///
/// Resource-constraint violations are reported, not rejected.
pub fn rate_report(
    assoc: &Association,
    channels: &ChannelRealization,
    sol: &ResourceSolution,
    cfg: &NetworkConfig,
) -> Result<RateReport> {
    if channels.num_aebs != assoc.num_aebs() || channels.num_gus != assoc.num_gus() {
        return Err(Error::Shape("channels and association disagree".into()));
    }
    sol.check_shape(assoc, channels.antennas)?;
    let dc = cfg.blocklength_common as f64;
    let dp = cfg.blocklength_private as f64;
    let eps = cfg.decoding_error;

    let mut gus: Vec<GuRate> = (0..assoc.num_gus())
        .map(|n| GuRate {
            gu: n,
            aebs: None,
            gamma_c: 0.0,
            gamma_p: 0.0,
            c_common: 0.0,
            r_common: 0.0,
            r_private: 0.0,
            r_total: 0.0,
            rmin_ok: false,
        })
        .collect();
    let mut common_cap = Vec::with_capacity(sol.aebs.len());
    let mut common_alloc = Vec::with_capacity(sol.aebs.len());
    let mut power = Vec::with_capacity(sol.aebs.len());
    let mut c5_ok = Vec::with_capacity(sol.aebs.len());
    let mut c8_ok = Vec::with_capacity(sol.aebs.len());
    let mut c7_ok = true;

    for (k, block) in sol.aebs.iter().enumerate() {
        let mut cap = f64::INFINITY;
        for (slot, &n) in block.served.iter().enumerate() {
            let gamma_c = sinr_common(k, n, assoc, channels, sol, cfg)?;
            let gamma_p = sinr_private(k, n, assoc, channels, sol, cfg)?;
            let c_common = fbl_rate(gamma_c, dc, eps);
            let r_common = block.common_split[slot];
            let r_private = fbl_rate(gamma_p, dp, eps);
            cap = cap.min(c_common);
            c7_ok &= r_common >= -FEASIBILITY_TOL;
            let r_total = r_common + r_private;
            gus[n] = GuRate {
                gu: n,
                aebs: Some(k),
                gamma_c,
                gamma_p,
                c_common,
                r_common,
                r_private,
                r_total,
                rmin_ok: r_total >= cfg.r_min - 1e-9,
            };
        }
        if block.served.is_empty() {
            cap = 0.0;
        }
        let alloc: f64 = block.common_split.iter().sum();
        c5_ok.push(alloc <= cap + FEASIBILITY_TOL);
        common_cap.push(cap);
        common_alloc.push(alloc);
        let p = block.power();
        c8_ok.push(p <= cfg.p_max_w * (1.0 + FEASIBILITY_TOL));
        power.push(p);
    }

    let sum_rate = gus.iter().filter(|g| g.aebs.is_some()).map(|g| g.r_total).sum();
    let cov = coverage(assoc);
    Ok(RateReport {
        gus,
        common_cap,
        common_alloc,
        power,
        c5_ok,
        c7_ok,
        c8_ok,
        sum_rate,
        coverage: cov,
        utility: utility(cov, sum_rate, cfg)?,
    })
}

/// Rate report of a solution that must not use the common stream.
pub fn sdma_rate_report(
    assoc: &Association,
    channels: &ChannelRealization,
    sol: &ResourceSolution,
    cfg: &NetworkConfig,
) -> Result<RateReport> {
    for (k, block) in sol.aebs.iter().enumerate() {
        if block.common_power() > 0.0 || block.common_split.iter().any(|&r| r != 0.0) {
            return Err(Error::CommonPowerInSdma { aebs: k });
        }
    }
    rate_report(assoc, channels, sol, cfg)
}

/// Splits a common-rate budget `cap` among GUs with private rates
/// `private`: first tops up GUs below `r_min` (neediest first), then
/// shares what is left equally.
pub fn allocate_common_split(cap: f64, private: &[f64], r_min: f64) -> Vec<f64> {
    let mut split = vec![0.0; private.len()];
    if private.is_empty() || !(cap > 0.0) {
        return split;
    }
    let mut order: Vec<usize> = (0..private.len()).collect();
    order.sort_by(|&a, &b| private[a].total_cmp(&private[b]));
    let mut left = cap;
    for &i in &order {
        let need = (r_min - private[i]).max(0.0).min(left);
        split[i] += need;
        left -= need;
    }
    if left > 0.0 {
        let share = left / private.len() as f64;
        split.iter_mut().for_each(|s| *s += share);
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_cfg() -> NetworkConfig {
        let mut cfg = NetworkConfig::desk();
        cfg.noise_w = 1.0;
        cfg.p_max_w = 10.0;
        cfg
    }

    /// Gaussian upper tail by composite Simpson quadrature of the density.
    fn q_quadrature(x: f64) -> f64 {
        let upper = x + 40.0;
        let steps = 200_000;
        let h = (upper - x) / steps as f64;
        let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = phi(x) + phi(upper);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * phi(x + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn q_inv_bisection(eps: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if q_quadrature(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn q_inv_matches_bisection_oracle() {
        let oracle = q_inv_bisection(1e-5);
        assert!((oracle - 4.26489).abs() < 1e-4, "{oracle}");
        assert!((q_inv(1e-5) - oracle).abs() < 1e-8);
        assert!((q_inv(1e-3) - q_inv_bisection(1e-3)).abs() < 1e-8);
    }

    #[test]
    fn fbl_rate_points() {
        assert_eq!(fbl_rate(0.0, 1000.0, 1e-5), 0.0);
        let oracle = 1.0 - (0.75f64 / 1000.0).sqrt() * q_inv_bisection(1e-5) / std::f64::consts::LN_2;
        assert!((fbl_rate(1.0, 1000.0, 1e-5) - oracle).abs() < 1e-8);
        assert!((fbl_rate(1.0, 1000.0, 1e-5) - 0.8315).abs() < 1e-4);
        assert!((fbl_rate(1.0, 1e30, 1e-5) - 1.0).abs() < 1e-12);
        assert!(fbl_rate_raw(1e-3, 100.0, 1e-5) < 0.0);
        assert_eq!(fbl_rate(1e-3, 100.0, 1e-5), 0.0);
    }

    fn single(h: Vec<Vec<Complex64>>, cols: Vec<Vec<Complex64>>) -> (Association, ChannelRealization, ResourceSolution) {
        let n = h.len();
        let ch = ChannelRealization::from_vectors(vec![h]).unwrap();
        let assoc = Association::from_serving(1, &vec![Some(0); n]).unwrap();
        let sol = ResourceSolution {
            aebs: vec![AebsResources {
                served: (0..n).collect(),
                precoders: cols,
                common_split: vec![0.0; n],
            }],
        };
        (assoc, ch, sol)
    }

    #[test]
    fn common_sinr_examples() {
        let cfg = unit_cfg();
        let (a, ch, sol) = single(
            vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]],
            vec![vec![c(2.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]],
        );
        assert!((sinr_common(0, 0, &a, &ch, &sol, &cfg).unwrap() - 4.0).abs() < 1e-12);
        let mut zero = sol.clone();
        zero.aebs[0].precoders[0] = vec![c(0.0, 0.0); 2];
        assert_eq!(sinr_common(0, 0, &a, &ch, &zero, &cfg).unwrap(), 0.0);
        assert!(matches!(sinr_common(0, 5, &a, &ch, &sol, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn private_sinr_examples() {
        let cfg = unit_cfg();
        let (a, ch, sol) = single(
            vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]],
            vec![vec![c(0.0, 0.0), c(0.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]],
        );
        assert!((sinr_private(0, 0, &a, &ch, &sol, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let mut orth = sol.clone();
        orth.aebs[0].precoders[1] = vec![c(0.0, 0.0), c(1.0, 0.0)];
        assert_eq!(sinr_private(0, 0, &a, &ch, &orth, &cfg).unwrap(), 0.0);
    }

    /// K = 2, N = 3, Nt = 2 instance with every stream active.
    fn two_cell() -> (Association, ChannelRealization, ResourceSolution, NetworkConfig) {
        let cfg = unit_cfg();
        let h = vec![
            vec![
                vec![c(0.3, 0.1), c(-0.2, 0.5)],
                vec![c(0.7, -0.4), c(0.1, 0.2)],
                vec![c(-0.6, 0.3), c(0.2, -0.1)],
            ],
            vec![
                vec![c(0.2, 0.2), c(0.4, -0.3)],
                vec![c(-0.1, 0.6), c(0.5, 0.5)],
                vec![c(0.9, 0.1), c(-0.3, 0.4)],
            ],
        ];
        let ch = ChannelRealization::from_vectors(h).unwrap();
        let assoc = Association::from_serving(2, &[Some(0), Some(0), Some(1)]).unwrap();
        let sol = ResourceSolution {
            aebs: vec![
                AebsResources {
                    served: vec![0, 1],
                    precoders: vec![
                        vec![c(0.5, 0.1), c(0.3, -0.2)],
                        vec![c(0.2, 0.4), c(-0.1, 0.3)],
                        vec![c(-0.3, 0.2), c(0.6, 0.1)],
                    ],
                    common_split: vec![0.0, 0.0],
                },
                AebsResources {
                    served: vec![2],
                    precoders: vec![vec![c(0.4, -0.1), c(0.2, 0.2)], vec![c(0.1, 0.5), c(0.7, -0.3)]],
                    common_split: vec![0.0],
                },
            ],
        };
        (assoc, ch, sol, cfg)
    }

    /// Term-by-term oracle straight from the SINR definitions.
    fn oracle_sinrs(assoc: &Association, ch: &ChannelRealization, sol: &ResourceSolution, noise: f64, k: usize, n: usize) -> (f64, f64) {
        let ip = |i: usize, p: &Vec<Complex64>| {
            let h = ch.vector(i, n);
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..h.len() {
                re += h[j].re * p[j].re + h[j].im * p[j].im;
                im += h[j].re * p[j].im - h[j].im * p[j].re;
            }
            re * re + im * im
        };
        let mut i_out = 0.0;
        for i in 0..assoc.num_aebs() {
            if i == k {
                continue;
            }
            i_out += ip(i, &sol.aebs[i].precoders[0]);
            for m in 0..assoc.num_gus() {
                if assoc.get(i, m) {
                    let slot = sol.aebs[i].served.iter().position(|&x| x == m).unwrap();
                    i_out += ip(i, &sol.aebs[i].precoders[slot + 1]);
                }
            }
        }
        let block = &sol.aebs[k];
        let mut intra_all = 0.0;
        let mut intra_others = 0.0;
        let mut own = 0.0;
        for j in 0..assoc.num_gus() {
            if assoc.get(k, j) {
                let slot = block.served.iter().position(|&x| x == j).unwrap();
                let v = ip(k, &block.precoders[slot + 1]);
                intra_all += v;
                if j == n {
                    own = v;
                } else {
                    intra_others += v;
                }
            }
        }
        let gc = ip(k, &block.precoders[0]) / (intra_all + i_out + noise);
        let gp = own / (intra_others + i_out + noise);
        (gc, gp)
    }

    #[test]
    fn sinrs_match_term_by_term_oracle() {
        let (a, ch, sol, cfg) = two_cell();
        for (k, n) in [(0, 0), (0, 1), (1, 2)] {
            let (gc, gp) = oracle_sinrs(&a, &ch, &sol, cfg.noise_w, k, n);
            assert!((sinr_common(k, n, &a, &ch, &sol, &cfg).unwrap() - gc).abs() < 1e-12);
            assert!((sinr_private(k, n, &a, &ch, &sol, &cfg).unwrap() - gp).abs() < 1e-12);
        }
    }

    #[test]
    fn second_aebs_adds_exact_cross_terms() {
        let (a, ch, sol, cfg) = two_cell();
        let mut silent = sol.clone();
        for col in &mut silent.aebs[1].precoders {
            col.iter_mut().for_each(|x| *x = c(0.0, 0.0));
        }
        let with = sinr_common(0, 0, &a, &ch, &sol, &cfg).unwrap();
        let without = sinr_common(0, 0, &a, &ch, &silent, &cfg).unwrap();
        let signal = inner(ch.vector(0, 0), &sol.aebs[0].precoders[0]).norm_sqr();
        let mut cross = 0.0;
        for col in &sol.aebs[1].precoders {
            cross += inner(ch.vector(1, 0), col).norm_sqr();
        }
        let delta = signal / with - signal / without;
        assert!((delta - cross).abs() < 1e-12);
    }

    #[test]
    fn zero_precoders_give_zero_rates() {
        let (a, ch, _, cfg) = two_cell();
        let zero = ResourceSolution::zeros(&a, 2);
        let r = rate_report(&a, &ch, &zero, &cfg).unwrap();
        assert_eq!(r.sum_rate, 0.0);
        assert!(r.gus.iter().all(|g| !g.rmin_ok));
        assert!((r.utility - cfg.lambda1 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn over_allocated_common_raises_c5() {
        let (a, ch, mut sol, cfg) = two_cell();
        let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
        sol.aebs[0].common_split = vec![r.common_cap[0], 0.01];
        let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
        assert!(!r.c5_ok[0]);
        assert!(r.c5_ok[1]);
    }

    #[test]
    fn orthogonal_two_gu_closed_form() {
        let mut cfg = unit_cfg();
        cfg.r_min = 0.5;
        let (a, ch, mut sol) = single(
            vec![vec![c(1.5, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(0.0, 2.0)]],
            vec![vec![c(0.8, 0.0), c(0.6, 0.0)], vec![c(0.7, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(0.5, 0.0)]],
        );
        let dc = cfg.blocklength_common as f64;
        let eps = cfg.decoding_error;
        // scalar channels: |h1| = 1.5, |h2| = 2
        let gp1 = (1.5f64 * 0.7).powi(2);
        let gp2 = (2.0f64 * 0.5).powi(2);
        let gc1 = (1.5f64 * 0.8).powi(2) / (gp1 + 1.0);
        let gc2 = (2.0f64 * 0.6).powi(2) / (gp2 + 1.0);
        let rate = |g: f64| {
            let v = 1.0 - 1.0 / ((1.0 + g) * (1.0 + g));
            ((1.0 + g).ln() - (v / dc).sqrt() * q_inv(eps)) / std::f64::consts::LN_2
        };
        let cap = rate(gc1).min(rate(gc2));
        sol.aebs[0].common_split = vec![0.25 * cap, 0.75 * cap];
        let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
        let expected = cap + rate(gp1) + rate(gp2);
        assert!((r.sum_rate - expected).abs() < 1e-9);
        assert!((r.common_cap[0] - cap).abs() < 1e-12);
        assert!((r.gus[0].r_total - (0.25 * cap + rate(gp1))).abs() < 1e-9);
        assert!(r.resources_ok());
    }

    #[test]
    fn sdma_equals_rsma_without_common() {
        let (a, ch, mut sol, cfg) = two_cell();
        for block in &mut sol.aebs {
            block.precoders[0].iter_mut().for_each(|x| *x = c(0.0, 0.0));
        }
        assert_eq!(
            sdma_rate_report(&a, &ch, &sol, &cfg).unwrap(),
            rate_report(&a, &ch, &sol, &cfg).unwrap()
        );
        sol.aebs[1].precoders[0][0] = c(1e-3, 0.0);
        assert!(matches!(
            sdma_rate_report(&a, &ch, &sol, &cfg),
            Err(Error::CommonPowerInSdma { aebs: 1 })
        ));
    }

    #[test]
    fn sdma_matches_rsma_optimum_on_orthogonal_channels() {
        // One GU per beam, orthogonal channels: putting power into the common
        // stream never helps, so the best RSMA sum rate over the common
        // fraction equals the SDMA sum rate.
        let cfg = unit_cfg();
        let h = vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]];
        let build = |frac: f64| {
            let pc = (cfg.p_max_w * frac).sqrt();
            let pp = (cfg.p_max_w * (1.0 - frac) / 2.0).sqrt();
            single(
                h.clone(),
                vec![
                    vec![c(pc / 2f64.sqrt(), 0.0), c(pc / 2f64.sqrt(), 0.0)],
                    vec![c(pp, 0.0), c(0.0, 0.0)],
                    vec![c(0.0, 0.0), c(pp, 0.0)],
                ],
            )
        };
        let mut best = 0.0f64;
        for i in 0..=100 {
            let (a, ch, mut sol) = build(i as f64 / 100.0);
            let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
            sol.aebs[0].common_split = vec![r.common_cap[0] / 2.0; 2];
            best = best.max(rate_report(&a, &ch, &sol, &cfg).unwrap().sum_rate);
        }
        let (a, ch, sol) = build(0.0);
        let sdma = sdma_rate_report(&a, &ch, &sol, &cfg).unwrap().sum_rate;
        assert!((best - sdma).abs() < 1e-12, "{best} vs {sdma}");
    }

    #[test]
    fn csv_has_one_row_per_gu() {
        let (a, ch, sol, cfg) = two_cell();
        let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn common_split_tops_up_the_needy() {
        let split = allocate_common_split(1.0, &[0.2, 1.5, 0.9], 1.0);
        let rest = 0.1 / 3.0;
        assert!((split[0] - (0.8 + rest)).abs() < 1e-12);
        assert!((split[1] - rest).abs() < 1e-12);
        assert!((split[2] - (0.1 + rest)).abs() < 1e-12);
        assert!((split.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let split = allocate_common_split(3.0, &[0.0, 2.0], 1.0);
        assert!((split[0] - 2.0).abs() < 1e-12 && (split[1] - 1.0).abs() < 1e-12);
        assert_eq!(allocate_common_split(0.0, &[0.0], 1.0), vec![0.0]);
    }

    proptest! {
        #[test]
        fn fbl_below_shannon_and_monotone(g in 0.0..1e4f64, dg in 0.0..10.0f64, d in 100.0..5000.0f64, dd in 0.0..1000.0f64, e in 1e-9..0.4f64) {
            let r = fbl_rate(g, d, e);
            prop_assert!(r <= (1.0 + g).log2() + 1e-12);
            prop_assert!(fbl_rate(g + dg, d, e) >= r - 1e-12);
            prop_assert!(fbl_rate(g, d + dd, e) >= r - 1e-12);
            prop_assert!(fbl_rate(g, d, e * 0.5) <= r + 1e-12);
        }

        #[test]
        fn common_phase_leaves_sinrs_unchanged(phase in 0.0..std::f64::consts::TAU) {
            let (a, ch, sol, cfg) = two_cell();
            let rot = Complex64::from_polar(1.0, phase);
            let mut turned = ch.clone();
            turned.h.iter_mut().for_each(|x| *x *= rot);
            for (k, n) in [(0, 0), (0, 1), (1, 2)] {
                let x = sinr_common(k, n, &a, &ch, &sol, &cfg).unwrap();
                let y = sinr_common(k, n, &a, &turned, &sol, &cfg).unwrap();
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
                let x = sinr_private(k, n, &a, &ch, &sol, &cfg).unwrap();
                let y = sinr_private(k, n, &a, &turned, &sol, &cfg).unwrap();
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
            }
        }

        #[test]
        fn single_user_matched_filter(h0 in -2.0..2.0f64, h1 in -2.0..2.0f64, p in 0.1..10.0f64) {
            let cfg = unit_cfg();
            let h = vec![c(h0, 0.3), c(h1, -0.1)];
            let norm = (h0 * h0 + 0.09 + h1 * h1 + 0.01).sqrt();
            let w: Vec<Complex64> = h.iter().map(|x| x * (p.sqrt() / norm)).collect();
            let ch = ChannelRealization::from_vectors(vec![vec![h]]).unwrap();
            let a = Association::from_serving(1, &[Some(0)]).unwrap();
            let sol = ResourceSolution { aebs: vec![AebsResources { served: vec![0], precoders: vec![vec![c(0.0, 0.0); 2], w], common_split: vec![0.0] }] };
            let g = sinr_private(0, 0, &a, &ch, &sol, &cfg).unwrap();
            prop_assert!((g - p * norm * norm / cfg.noise_w).abs() < 1e-9 * g.max(1.0));
        }

        #[test]
        fn sum_rate_is_double_loop_sum(s0 in 0.0..0.1f64, s1 in 0.0..0.1f64) {
            let (a, ch, mut sol, cfg) = two_cell();
            sol.aebs[0].common_split = vec![s0, s1];
            let r = rate_report(&a, &ch, &sol, &cfg).unwrap();
            let mut acc = 0.0;
            for k in 0..2 {
                for n in 0..3 {
                    if a.get(k, n) {
                        acc += r.gus[n].r_common + r.gus[n].r_private;
                    }
                }
            }
            prop_assert!((r.sum_rate - acc).abs() < 1e-12);
        }
    }
}
