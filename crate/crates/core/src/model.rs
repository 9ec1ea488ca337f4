//! Network geometry, association, coverage, utility and the constraint
//! auditor for the placement/association constraints (C1-C4, C9, C10).

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn horizontal_distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// AeBS positions; every AeBS flies at the common altitude H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub positions: Vec<Point2>,
    pub altitude: f64,
}

impl Placement {
    pub fn new(positions: Vec<Point2>, altitude: f64) -> Self {
        Placement {
            positions,
            altitude,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// 3D distance between two AeBSs (equal altitude, so horizontal).
    pub fn separation(&self, a: usize, b: usize) -> f64 {
        self.positions[a].horizontal_distance(&self.positions[b])
    }
}

/// K x N association matrix, stored row-major.
///
/// Entries are kept as raw `u8` so that a non-binary matrix read from a
/// file can still be audited (C3). A GU may be left unserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    num_aebs: usize,
    num_gus: usize,
    alpha: Vec<u8>,
}

impl Association {
    pub fn empty(num_aebs: usize, num_gus: usize) -> Self {
        Association {
            num_aebs,
            num_gus,
            alpha: vec![0; num_aebs * num_gus],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let num_aebs = rows.len();
        let num_gus = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_gus) {
            return Err(Error::Shape("association rows differ in length".into()));
        }
        Ok(Association {
            num_aebs,
            num_gus,
            alpha: rows.concat(),
        })
    }

    /// Builds an association from the serving AeBS of every GU.
    pub fn from_serving(num_aebs: usize, serving: &[Option<usize>]) -> Result<Self> {
        let mut assoc = Association::empty(num_aebs, serving.len());
        for (n, s) in serving.iter().enumerate() {
            if let Some(k) = *s {
                if k >= num_aebs {
                    return Err(Error::Index {
                        what: "aebs",
                        index: k,
                        limit: num_aebs,
                    });
                }
                assoc.set(k, n, true);
            }
        }
        Ok(assoc)
    }

    pub fn num_aebs(&self) -> usize {
        self.num_aebs
    }

    pub fn num_gus(&self) -> usize {
        self.num_gus
    }

    pub fn raw(&self, k: usize, n: usize) -> u8 {
        self.alpha[k * self.num_gus + n]
    }

    pub fn get(&self, k: usize, n: usize) -> bool {
        self.raw(k, n) == 1
    }

    pub fn set(&mut self, k: usize, n: usize, on: bool) {
        self.alpha[k * self.num_gus + n] = on as u8;
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.alpha.chunks(self.num_gus.max(1)).map(<[u8]>::to_vec).collect()
    }

    /// GUs served by AeBS `k`, ascending.
    pub fn cluster(&self, k: usize) -> Vec<usize> {
        (0..self.num_gus).filter(|&n| self.get(k, n)).collect()
    }

    /// Number of AeBSs GU `n` is associated with.
    pub fn links_of(&self, n: usize) -> usize {
        (0..self.num_aebs).filter(|&k| self.get(k, n)).count()
    }

    /// The unique serving AeBS of GU `n`, if there is exactly one.
    pub fn serving(&self, n: usize) -> Option<usize> {
        let mut it = (0..self.num_aebs).filter(|&k| self.get(k, n));
        match (it.next(), it.next()) {
            (Some(k), None) => Some(k),
            _ => None,
        }
    }

    pub fn total_links(&self) -> usize {
        self.alpha.iter().filter(|&&a| a == 1).count()
    }
}

/// Distance between AeBS `k` and GU `n`: sqrt(H^2 + l^2).
pub fn distance(placement: &Placement, gus: &[Point2], k: usize, n: usize) -> Result<f64> {
    let aebs = placement.positions.get(k).ok_or(Error::Index {
        what: "aebs",
        index: k,
        limit: placement.len(),
    })?;
    let gu = gus.get(n).ok_or(Error::Index {
        what: "gu",
        index: n,
        limit: gus.len(),
    })?;
    let l = aebs.horizontal_distance(gu);
    Ok(placement.altitude.hypot(l))
}

/// Fraction of GUs with an association entry: sum(alpha) / N.
pub fn coverage(assoc: &Association) -> f64 {
    if assoc.num_gus() == 0 {
        return 0.0;
    }
    assoc.total_links() as f64 / assoc.num_gus() as f64
}

/// U = lambda1 * C + lambda2 * R_sum / R_N.
pub fn utility(coverage: f64, sum_rate: f64, cfg: &NetworkConfig) -> Result<f64> {
    let norm = cfg.rate_norm();
    if !(norm > 0.0) {
        return Err(Error::config("rate_norm", "must be positive"));
    }
    Ok(cfg.lambda1 * coverage + cfg.lambda2 * sum_rate / norm)
}

/// Outcome of auditing a placement/association pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub c1_ok: bool,
    pub c2_ok: bool,
    pub c3_ok: bool,
    pub c4_ok: bool,
    pub c9_ok: bool,
    pub c10_ok: bool,
    /// Association violation (any of C1-C3).
    pub xi_a: u8,
    /// Location violation (C4).
    pub xi_m: u8,
    /// Collision violation (C9).
    pub xi_c: u8,
    /// Range violation (C10).
    pub xi_r: u8,
}

impl ConstraintReport {
    pub fn all_clear(&self) -> bool {
        self.xi_a == 0 && self.xi_m == 0 && self.xi_c == 0 && self.xi_r == 0
    }

    pub fn indicators(&self) -> [u8; 4] {
        [self.xi_a, self.xi_m, self.xi_c, self.xi_r]
    }
}

/// Evaluates C1-C4, C9 and C10 and derives the violation indicators.
///
/// Shapes are assumed consistent with `cfg`; missing rows or GUs count as
/// violations rather than errors.
pub fn audit_constraints(
    placement: &Placement,
    assoc: &Association,
    gus: &[Point2],
    cfg: &NetworkConfig,
) -> ConstraintReport {
    let k_count = placement.len();
    let shapes_ok = assoc.num_aebs() == k_count && assoc.num_gus() == gus.len();

    let c3_ok = shapes_ok && (0..k_count).all(|k| (0..gus.len()).all(|n| assoc.raw(k, n) <= 1));
    let c1_ok = shapes_ok && (0..gus.len()).all(|n| assoc.links_of(n) == 1);
    let c2_ok = shapes_ok
        && (0..k_count).all(|k| {
            let served = assoc.cluster(k).len();
            served >= 2 && served <= cfg.max_gus_per_aebs
        });

    let c4_ok = placement.positions.iter().all(|p| {
        p.x >= cfg.area_x[0] && p.x <= cfg.area_x[1] && p.y >= cfg.area_y[0] && p.y <= cfg.area_y[1]
    });

    let mut c9_ok = true;
    for a in 0..k_count {
        for b in a + 1..k_count {
            if placement.separation(a, b) < cfg.safety_distance_m {
                c9_ok = false;
            }
        }
    }

    let big_m = cfg.big_m();
    let c10_ok = shapes_ok
        && (0..k_count).all(|k| {
            (0..gus.len()).all(|n| {
                let d = placement.altitude.hypot(placement.positions[k].horizontal_distance(&gus[n]));
                let alpha = f64::from(assoc.raw(k, n).min(1));
                d <= cfg.comm_radius_m + big_m * (1.0 - alpha)
            })
        });

    ConstraintReport {
        c1_ok,
        c2_ok,
        c3_ok,
        c4_ok,
        c9_ok,
        c10_ok,
        xi_a: u8::from(!(c1_ok && c2_ok && c3_ok)),
        xi_m: u8::from(!c4_ok),
        xi_c: u8::from(!c9_ok),
        xi_r: u8::from(!c10_ok),
    }
}

/// Association restricted to links that can actually carry traffic.
///
/// GUs linked to more than one AeBS are dropped entirely (covered by none),
/// as are links longer than the communication radius. Under-filled or
/// over-filled clusters are kept; they are penalized through `xi_a`.
pub fn serviceable_association(
    placement: &Placement,
    assoc: &Association,
    gus: &[Point2],
    cfg: &NetworkConfig,
) -> Association {
    let mut out = Association::empty(assoc.num_aebs(), assoc.num_gus());
    for n in 0..assoc.num_gus() {
        let Some(k) = assoc.serving(n) else { continue };
        if k >= placement.len() || n >= gus.len() {
            continue;
        }
        let d = placement.altitude.hypot(placement.positions[k].horizontal_distance(&gus[n]));
        if d <= cfg.comm_radius_m {
            out.set(k, n, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_aebs(x: f64, y: f64) -> Placement {
        Placement::new(vec![Point2::new(x, y)], 50.0)
    }

    #[test]
    fn distance_examples() {
        let p = one_aebs(0.0, 0.0);
        let gus = [Point2::new(120.0, 0.0), Point2::new(0.0, 0.0), Point2::new(30.0, 40.0)];
        assert!((distance(&p, &gus, 0, 0).unwrap() - 130.0).abs() < 1e-12);
        assert!((distance(&p, &gus, 0, 1).unwrap() - 50.0).abs() < 1e-12);
        assert!((distance(&p, &gus, 0, 2).unwrap() - 70.7107).abs() < 1e-4);
        assert!(matches!(distance(&p, &gus, 1, 0), Err(Error::Index { .. })));
        assert!(matches!(distance(&p, &gus, 0, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn coverage_examples() {
        let all = Association::from_serving(2, &[Some(0), Some(0), Some(1), Some(1)]).unwrap();
        assert_eq!(coverage(&all), 1.0);
        let three = Association::from_serving(2, &[Some(0), None, Some(1), Some(1)]).unwrap();
        assert_eq!(coverage(&three), 0.75);
        assert_eq!(coverage(&Association::empty(2, 4)), 0.0);
    }

    #[test]
    fn utility_examples() {
        let mut cfg = NetworkConfig::desk();
        cfg.rate_norm = Some(10.0);
        assert!((utility(0.5, 3.0, &cfg).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(utility(0.0, 0.0, &cfg).unwrap(), 0.0);
        cfg.lambda1 = 2.0;
        assert!((utility(1.0, 5.0, &cfg).unwrap() - 2.5).abs() < 1e-12);
        cfg.rate_norm = Some(0.0);
        assert!(utility(1.0, 1.0, &cfg).is_err());
    }

    fn feasible_pair() -> (Placement, Association, Vec<Point2>, NetworkConfig) {
        let cfg = NetworkConfig::desk();
        let placement = Placement::new(vec![Point2::new(250.0, 250.0), Point2::new(750.0, 750.0)], 50.0);
        let gus = vec![
            Point2::new(200.0, 250.0),
            Point2::new(300.0, 250.0),
            Point2::new(250.0, 200.0),
            Point2::new(250.0, 300.0),
            Point2::new(700.0, 750.0),
            Point2::new(800.0, 750.0),
            Point2::new(750.0, 700.0),
            Point2::new(750.0, 800.0),
        ];
        let serving: Vec<_> = (0..8).map(|n| Some(n / 4)).collect();
        let assoc = Association::from_serving(2, &serving).unwrap();
        (placement, assoc, gus, cfg)
    }

    #[test]
    fn feasible_instance_is_clear() {
        let (p, a, g, cfg) = feasible_pair();
        let report = audit_constraints(&p, &a, &g, &cfg);
        assert!(report.all_clear(), "{report:?}");
    }

    #[test]
    fn double_assignment_breaks_c1() {
        let (p, mut a, g, cfg) = feasible_pair();
        a.set(1, 0, true);
        let report = audit_constraints(&p, &a, &g, &cfg);
        assert!(!report.c1_ok);
        assert_eq!(report.xi_a, 1);
    }

    #[test]
    fn lonely_aebs_breaks_c2() {
        let cfg = NetworkConfig::desk();
        let p = Placement::new(vec![Point2::new(250.0, 250.0), Point2::new(300.0, 250.0)], 50.0);
        let gus = vec![Point2::new(250.0, 260.0), Point2::new(260.0, 250.0), Point2::new(300.0, 260.0), Point2::new(240.0, 250.0)];
        let a = Association::from_serving(2, &[Some(0), Some(0), Some(1), Some(0)]).unwrap();
        let report = audit_constraints(&p, &a, &gus, &cfg);
        assert!(report.c1_ok);
        assert!(!report.c2_ok);
        assert_eq!(report.xi_a, 1);
    }

    #[test]
    fn out_of_range_breaks_c10() {
        let mut cfg = NetworkConfig::desk();
        cfg.comm_radius_m = 100.0;
        let p = Placement::new(vec![Point2::new(0.0, 0.0), Point2::new(500.0, 500.0)], 50.0);
        let gus = vec![Point2::new(120.0, 0.0), Point2::new(10.0, 0.0), Point2::new(500.0, 510.0), Point2::new(510.0, 500.0)];
        let a = Association::from_serving(2, &[Some(0), Some(0), Some(1), Some(1)]).unwrap();
        let report = audit_constraints(&p, &a, &gus, &cfg);
        assert!(!report.c10_ok);
        assert_eq!(report.xi_r, 1);
        assert_eq!(report.xi_a, 0);
    }

    #[test]
    fn non_binary_entry_breaks_c3() {
        let (p, a, g, cfg) = feasible_pair();
        let mut rows = a.rows();
        rows[0][0] = 2;
        let a = Association::from_rows(&rows).unwrap();
        let report = audit_constraints(&p, &a, &g, &cfg);
        assert!(!report.c3_ok);
        assert_eq!(report.xi_a, 1);
    }

    #[test]
    fn outside_area_breaks_c4() {
        let (mut p, a, g, cfg) = feasible_pair();
        p.positions[0].x = -1.0;
        let report = audit_constraints(&p, &a, &g, &cfg);
        assert_eq!(report.xi_m, 1);
        assert_eq!(report.xi_c, 0);
    }

    #[test]
    fn serviceable_drops_double_and_far_links() {
        let (p, mut a, mut g, cfg) = feasible_pair();
        a.set(1, 0, true);
        g[7] = Point2::new(990.0, 990.0);
        let s = serviceable_association(&p, &a, &g, &cfg);
        assert_eq!(s.links_of(0), 0);
        assert!(!s.get(1, 7));
        assert_eq!(s.total_links(), 6);
    }

    proptest! {
        #[test]
        fn coverage_ignores_row_order(bits in proptest::collection::vec(0u8..2, 12), shift in 0usize..3) {
            let rows: Vec<Vec<u8>> = bits.chunks(4).map(<[u8]>::to_vec).collect();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift);
            let a = Association::from_rows(&rows).unwrap();
            let b = Association::from_rows(&rotated).unwrap();
            prop_assert_eq!(coverage(&a), coverage(&b));
        }

        #[test]
        fn unassociated_pairs_never_trip_range(x in 0.0..1000.0f64, y in 0.0..1000.0f64, gx in 0.0..1000.0f64, gy in 0.0..1000.0f64) {
            let cfg = NetworkConfig::desk();
            let p = Placement::new(vec![Point2::new(x, y), Point2::new(1000.0 - x, 1000.0 - y)], 50.0);
            let gus = vec![Point2::new(gx, gy); 4];
            let report = audit_constraints(&p, &Association::empty(2, 4), &gus, &cfg);
            prop_assert!(report.c10_ok);
        }

        #[test]
        fn collision_flips_only_xi_c(gap in 0.0..9.99f64) {
            let (mut p, a, g, cfg) = feasible_pair();
            let base = audit_constraints(&p, &a, &g, &cfg);
            p.positions[1] = Point2::new(p.positions[0].x + gap, p.positions[0].y);
            // keep the second cluster in range of its (moved) AeBS
            let g2: Vec<Point2> = g.iter().enumerate().map(|(n, q)| if n >= 4 { Point2::new(q.x - 500.0, q.y - 500.0) } else { *q }).collect();
            let moved = audit_constraints(&p, &a, &g2, &cfg);
            prop_assert!(base.all_clear());
            prop_assert_eq!(moved.indicators(), [0, 0, 1, 0]);
        }
    }
}
