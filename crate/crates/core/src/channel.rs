//! Air-to-ground channel model and per-pair channel synthesis.

use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::{Placement, Point2};

/// LoS probability at elevation angle `theta_deg` (degrees).
pub fn p_los(theta_deg: f64, eta: f64, varsigma: f64) -> f64 {
    1.0 / (1.0 + eta * (-varsigma * (theta_deg - eta)).exp())
}

/// Elevation angle in degrees seen from a GU at horizontal distance `l`.
pub fn elevation_deg(altitude: f64, l: f64) -> f64 {
    altitude.atan2(l).to_degrees()
}

/// Free-space loss 20 log10(4 pi fc d / c).
pub fn free_space_loss_db(d: f64, cfg: &NetworkConfig) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * cfg.carrier_hz * d / cfg.speed_of_light).log10()
}

/// Mean A2G path loss for a given LoS probability.
pub fn path_loss_db_with(d: f64, plos: f64, cfg: &NetworkConfig) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {d}")));
    }
    let fspl = free_space_loss_db(d, cfg);
    Ok(fspl + plos * cfg.zeta_los_db + (1.0 - plos) * cfg.zeta_nlos_db)
}

/// Mean A2G path loss at distance `d` and elevation `theta_deg`.
pub fn path_loss_db(d: f64, theta_deg: f64, cfg: &NetworkConfig) -> Result<f64> {
    path_loss_db_with(d, p_los(theta_deg, cfg.eta, cfg.varsigma), cfg)
}

/// Small-scale fading model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    /// i.i.d. CN(0, 1) per antenna.
    #[default]
    Rayleigh,
    /// g = 1 on every antenna; deterministic test hook.
    Unit,
}

/// Channel vectors from every AeBS to every GU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub num_aebs: usize,
    pub num_gus: usize,
    pub antennas: usize,
    pub seed: u64,
    /// Flattened as `[(k * N + n) * Nt + j]`.
    pub h: Vec<Complex64>,
    /// Flattened as `[k * N + n]`.
    pub pl_db: Vec<f64>,
}

impl ChannelRealization {
    /// Builds a realization from explicit vectors, `vectors[k][n]`.
    pub fn from_vectors(vectors: Vec<Vec<Vec<Complex64>>>) -> Result<Self> {
        let num_aebs = vectors.len();
        let num_gus = vectors.first().map_or(0, Vec::len);
        let antennas = vectors
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        let mut h = Vec::with_capacity(num_aebs * num_gus * antennas);
        for row in &vectors {
            if row.len() != num_gus {
                return Err(Error::Shape("channel rows differ in length".into()));
            }
            for v in row {
                if v.len() != antennas {
                    return Err(Error::Shape("channel vectors differ in length".into()));
                }
                h.extend_from_slice(v);
            }
        }
        Ok(ChannelRealization {
            num_aebs,
            num_gus,
            antennas,
            seed: 0,
            h,
            pl_db: vec![0.0; num_aebs * num_gus],
        })
    }

    /// Channel vector from AeBS `k` to GU `n`.
    pub fn vector(&self, k: usize, n: usize) -> &[Complex64] {
        let start = (k * self.num_gus + n) * self.antennas;
        &self.h[start..start + self.antennas]
    }

    pub fn pl_db(&self, k: usize, n: usize) -> f64 {
        self.pl_db[k * self.num_gus + n]
    }

    /// Squared norm of the channel from `k` to `n`.
    pub fn gain(&self, k: usize, n: usize) -> f64 {
        self.vector(k, n).iter().map(|c| c.norm_sqr()).sum()
    }

    /// Returns a copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ChannelRealization {
            h: self.h.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    /// Writes `k,n,antenna,re,im,pl_db` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "n", "antenna", "re", "im", "pl_db"])?;
        for k in 0..self.num_aebs {
            for n in 0..self.num_gus {
                for (j, c) in self.vector(k, n).iter().enumerate() {
                    w.serialize((k, n, j, c.re, c.im, self.pl_db(k, n)))?;
                }
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Synthesizes Rayleigh-faded channels for every AeBS-GU pair.
pub fn realize_channels(
    placement: &Placement,
    gus: &[Point2],
    cfg: &NetworkConfig,
    seed: u64,
) -> Result<ChannelRealization> {
    realize_channels_with(placement, gus, cfg, seed, Fading::Rayleigh)
}

/// Channel synthesis with an explicit fading model.
///
/// Each (k, n) pair draws from its own ChaCha stream, so the fading of a
/// pair depends only on `(seed, k, n)` and not on the geometry or the
/// order of evaluation.
pub fn realize_channels_with(
    placement: &Placement,
    gus: &[Point2],
    cfg: &NetworkConfig,
    seed: u64,
    fading: Fading,
) -> Result<ChannelRealization> {
    let k_count = placement.len();
    let n_count = gus.len();
    let nt = cfg.antennas;
    let mut h = Vec::with_capacity(k_count * n_count * nt);
    let mut pl = Vec::with_capacity(k_count * n_count);
    for k in 0..k_count {
        for (n, gu) in gus.iter().enumerate() {
            let l = placement.positions[k].horizontal_distance(gu);
            let d = placement.altitude.hypot(l);
            let pl_db = path_loss_db(d, elevation_deg(placement.altitude, l), cfg)?;
            let amp = 10f64.powf(-pl_db / 20.0);
            pl.push(pl_db);
            let g = fading_draws(seed, (k * n_count + n) as u64, nt, fading);
            h.extend(g.into_iter().map(|g| g * amp));
        }
    }
    Ok(ChannelRealization {
        num_aebs: k_count,
        num_gus: n_count,
        antennas: nt,
        seed,
        h,
        pl_db: pl,
    })
}

/// Fading draws of one pair; `pair` selects the RNG stream.
pub fn fading_draws(seed: u64, pair: u64, antennas: usize, fading: Fading) -> Vec<Complex64> {
    match fading {
        Fading::Unit => vec![Complex64::new(1.0, 0.0); antennas],
        Fading::Rayleigh => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pair);
            let s = std::f64::consts::FRAC_1_SQRT_2;
            (0..antennas)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re * s, im * s)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn p_los_points() {
        assert!((p_los(9.61, 9.61, 0.16) - 1.0 / 10.61).abs() < 1e-12);
        assert!((p_los(45.0, 9.61, 0.16) - 0.9677).abs() < 1e-3);
        assert!((p_los(90.0, 9.61, 0.16) - 0.99997).abs() < 1e-4);
    }

    #[test]
    fn path_loss_points() {
        let cfg = NetworkConfig::reference(2, 8);
        // 4 pi fc d / c = 4 pi * 800 at d = 100 m
        let fspl = 20.0 * (4.0 * std::f64::consts::PI * 800.0).log10();
        assert!((path_loss_db_with(100.0, 1.0, &cfg).unwrap() - (fspl + 1.0)).abs() < 1e-9);
        assert!((path_loss_db_with(100.0, 1.0, &cfg).unwrap() - 81.046).abs() < 0.01);
        assert!((path_loss_db_with(100.0, 0.0, &cfg).unwrap() - 100.046).abs() < 0.01);
        assert!(matches!(path_loss_db(0.0, 45.0, &cfg), Err(Error::Domain(_))));
        assert!(path_loss_db(-3.0, 45.0, &cfg).is_err());
    }

    #[test]
    fn equal_excess_losses_collapse() {
        let mut cfg = NetworkConfig::reference(2, 8);
        cfg.zeta_los_db = 7.0;
        cfg.zeta_nlos_db = 7.0;
        for theta in [1.0, 20.0, 60.0, 89.0] {
            let pl = path_loss_db(250.0, theta, &cfg).unwrap();
            assert!((pl - free_space_loss_db(250.0, &cfg) - 7.0).abs() < 1e-9);
        }
    }

    fn small_instance() -> (Placement, Vec<Point2>, NetworkConfig) {
        let cfg = NetworkConfig::desk();
        let p = Placement::new(vec![Point2::new(100.0, 100.0), Point2::new(600.0, 300.0)], 50.0);
        let gus = vec![Point2::new(120.0, 90.0), Point2::new(500.0, 500.0), Point2::new(0.0, 0.0)];
        (p, gus, cfg)
    }

    #[test]
    fn unit_fading_magnitude() {
        let (p, gus, cfg) = small_instance();
        let ch = realize_channels_with(&p, &gus, &cfg, 3, Fading::Unit).unwrap();
        for k in 0..2 {
            for n in 0..3 {
                let amp = 10f64.powf(-ch.pl_db(k, n) / 20.0);
                for c in ch.vector(k, n) {
                    assert!((c.norm() - amp).abs() <= 1e-15 * amp.max(1.0));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_channels() {
        let (p, gus, cfg) = small_instance();
        let a = realize_channels(&p, &gus, &cfg, 11).unwrap();
        let b = realize_channels(&p, &gus, &cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = realize_channels(&p, &gus, &cfg, 12).unwrap();
        assert_ne!(a.h, c.h);
    }

    #[test]
    fn fading_does_not_depend_on_geometry() {
        let (p, gus, cfg) = small_instance();
        let mut moved = p.clone();
        moved.positions[0] = Point2::new(900.0, 900.0);
        let a = realize_channels(&p, &gus, &cfg, 5).unwrap();
        let b = realize_channels(&moved, &gus, &cfg, 5).unwrap();
        let ratio = |ch: &ChannelRealization| {
            let amp = 10f64.powf(-ch.pl_db(0, 1) / 20.0);
            ch.vector(0, 1)[0] / amp
        };
        assert!((ratio(&a) - ratio(&b)).norm() < 1e-12);
        assert_eq!(a.vector(1, 2), b.vector(1, 2));
    }

    #[test]
    fn rayleigh_unit_variance() {
        let mut sum = 0.0;
        let draws = 100_000;
        for pair in 0..draws / 4 {
            for g in fading_draws(99, pair as u64, 4, Fading::Rayleigh) {
                sum += g.norm_sqr();
            }
        }
        let var = sum / draws as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn csv_dump_has_one_row_per_antenna() {
        let (p, gus, cfg) = small_instance();
        let ch = realize_channels(&p, &gus, &cfg, 1).unwrap();
        let mut buf = Vec::new();
        ch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,n,antenna,re,im,pl_db\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3 * cfg.antennas);
    }

    proptest! {
        #[test]
        fn p_los_increasing(a in 0.0..90.0f64, b in 0.0..90.0f64) {
            prop_assume!(a < b - 1e-9);
            prop_assert!(p_los(a, 9.61, 0.16) < p_los(b, 9.61, 0.16));
        }

        #[test]
        fn path_loss_monotone_and_bounded(d1 in 1.0..2000.0f64, d2 in 1.0..2000.0f64, theta in 0.0..90.0f64) {
            prop_assume!(d1 < d2 * (1.0 - 1e-9));
            let cfg = NetworkConfig::reference(2, 8);
            let a = path_loss_db(d1, theta, &cfg).unwrap();
            let b = path_loss_db(d2, theta, &cfg).unwrap();
            prop_assert!(a < b);
            let fspl = free_space_loss_db(d1, &cfg);
            prop_assert!(a >= fspl + cfg.zeta_los_db - 1e-9 && a <= fspl + cfg.zeta_nlos_db + 1e-9);
        }
    }
}
