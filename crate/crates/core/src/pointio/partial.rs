//! Partial observations by half-space removal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{fps, Point, PointCloud};

/// Retained fraction bounds for a cut.
pub const MIN_RETAINED: f64 = 0.4;
pub const MAX_RETAINED: f64 = 0.7;
const MAX_ATTEMPTS: usize = 256;

/// Points with `(p − point)·normal > 0` are removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub point: Point,
    pub normal: Point,
}

impl Plane {
    fn side(&self, p: &Point) -> f64 {
        (0..3)
            .map(|i| (p[i] - self.point[i]) * self.normal[i])
            .sum()
    }
}

/// Indices of the points kept by `plane`, in cloud order.
pub fn crop(cloud: &PointCloud, plane: &Plane) -> Vec<usize> {
    (0..cloud.len())
        .filter(|&i| plane.side(&cloud.points()[i]) <= 0.0)
        .collect()
}

/// Resizes to exactly `n` points: fps from index 0 when there are too many,
/// random duplicates appended when there are too few.
pub fn match_count(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if cloud.is_empty() || n == 0 {
        return Err(Error::contract(
            "match_count needs a non-empty cloud and n ≥ 1",
        ));
    }
    if cloud.len() >= n {
        return cloud.select(&fps(cloud, n, 0)?);
    }
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    while idx.len() < n {
        idx.push(rng.gen_range(0..cloud.len()));
    }
    cloud.select(&idx)
}

fn random_direction(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let g: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if len > 1e-12 {
            return g.map(|c| c / len);
        }
    }
}

/// A plane through a surface point that keeps between 40% and 70% of `gt`.
///
/// Random planes are tried first; after a bounded number of misses the last
/// direction is reused with the plane moved to the surface point at the 55th
/// percentile along it.
pub fn cut_plane(gt: &PointCloud, rng: &mut ChaCha8Rng) -> Plane {
    let n = gt.len() as f64;
    let mut normal = [1.0, 0.0, 0.0];
    for _ in 0..MAX_ATTEMPTS {
        let point = gt.points()[rng.gen_range(0..gt.len())];
        normal = random_direction(rng);
        let plane = Plane { point, normal };
        let kept = crop(gt, &plane).len() as f64 / n;
        if (MIN_RETAINED..=MAX_RETAINED).contains(&kept) {
            return plane;
        }
    }
    let mut order: Vec<usize> = (0..gt.len()).collect();
    let proj = |i: usize| -> f64 { (0..3).map(|a| gt.points()[i][a] * normal[a]).sum() };
    order.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)));
    let pick = order[((0.55 * n) as usize).min(gt.len() - 1)];
    Plane {
        point: gt.points()[pick],
        normal,
    }
}

/// The occluded view of `gt` with exactly `n_partial` points.
pub fn make_partial(gt: &PointCloud, n_partial: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = cut_plane(gt, &mut rng);
    let kept = gt.select(&crop(gt, &plane))?;
    let mut out = match_count(&kept, n_partial, &mut rng)?;
    // duplicates go to random rows so the encoder sees no ordering pattern
    if kept.len() < n_partial {
        let mut pts = out.into_points();
        pts.shuffle(&mut rng);
        out = PointCloud::new(pts)?;
    }
    Ok(out)
}
