//! Ground-user layouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuLayout {
    /// Independent uniform positions over the task area.
    Uniform,
    /// GUs dealt round-robin to `count` discs of radius `radius_m`.
    Hotspots { count: usize, radius_m: f64 },
}

impl Default for GuLayout {
    fn default() -> Self {
        GuLayout::Hotspots {
            count: 2,
            radius_m: 80.0,
        }
    }
}

/// Draws GU positions for `layout`, deterministic in `seed`.
///
/// Hotspot centers keep a margin of one radius from the area border and,
/// when room allows, three radii from each other.
pub fn place_gus(layout: &GuLayout, cfg: &NetworkConfig, seed: u64) -> Result<Vec<Point2>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x0, x1] = cfg.area_x;
    let [y0, y1] = cfg.area_y;
    match *layout {
        GuLayout::Uniform => Ok((0..cfg.num_gus)
            .map(|_| Point2::new(rng.random_range(x0..=x1), rng.random_range(y0..=y1)))
            .collect()),
        GuLayout::Hotspots { count, radius_m } => {
            if count == 0 {
                return Err(Error::config("layout.count", "need at least one hotspot"));
            }
            if !(radius_m > 0.0) || 2.0 * radius_m >= cfg.area_width().min(cfg.area_height()) {
                return Err(Error::config("layout.radius_m", "must be positive and fit the area"));
            }
            let mut centers: Vec<Point2> = Vec::with_capacity(count);
            let mut attempts = 0;
            while centers.len() < count {
                let c = Point2::new(
                    rng.random_range(x0 + radius_m..=x1 - radius_m),
                    rng.random_range(y0 + radius_m..=y1 - radius_m),
                );
                attempts += 1;
                let spaced = centers.iter().all(|o| o.horizontal_distance(&c) >= 3.0 * radius_m);
                if spaced || attempts > 1000 {
                    centers.push(c);
                }
            }
            Ok((0..cfg.num_gus)
                .map(|n| {
                    let c = centers[n % count];
                    let r = radius_m * rng.random::<f64>().sqrt();
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    Point2::new(
                        (c.x + r * th.cos()).clamp(x0, x1),
                        (c.y + r * th.sin()).clamp(y0, y1),
                    )
                })
                .collect())
        }
    }
}
