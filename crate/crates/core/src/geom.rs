//! Point-set kernels: distances, k-nearest neighbours, farthest point
//! sampling, and the Chamfer-family losses.
//!
//! Every search is brute force over squared Euclidean distance computed as
//! `dx·dx + dy·dy + dz·dz`. Ties always resolve to the lowest index, so the
//! index-valued results and the gradients routed through them are
//! deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub type Point = [f64; 3];

/// A non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract(
                "point cloud must contain at least one point",
            ));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::contract(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(PointCloud { points })
    }

    /// Reads an `N×3` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::shape("point cloud", t.shape(), &[0, 3]));
        }
        Self::new(
            t.data()
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::new([self.points.len(), 3], data).expect("non-empty cloud")
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or(Error::Index {
                op: "select",
                index: i,
                len: self.points.len(),
            })?;
            out.push(*p);
        }
        Self::new(out)
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.points
            .iter()
            .flatten()
            .fold(0.0, |m, c| m.max(c.abs()))
    }
}

#[inline]
pub fn sqdist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// `N×M` matrix of squared distances.
pub fn pairwise_sqdist(a: &PointCloud, b: &PointCloud) -> Tensor {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for p in a.points() {
        data.extend(b.points().iter().map(|q| sqdist(p, q)));
    }
    Tensor::new([a.len(), b.len()], data).expect("non-empty clouds")
}

/// Row-major `N×k` neighbour indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// All rows concatenated.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// The `k` nearest reference points of every query point, nearest first.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<Neighbors> {
    if k == 0 || k > reference.len() {
        return Err(Error::contract(format!(
            "knn needs 1 <= k <= {} reference points, got k = {k}",
            reference.len()
        )));
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in query.points() {
        best.clear();
        for (j, r) in reference.points().iter().enumerate() {
            let d = sqdist(q, r);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            // after every entry with distance <= d, so earlier indices win ties
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        indices.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(Neighbors { k, indices })
}

/// Greedy farthest point sampling of `m` indices beginning at `start`.
///
/// Each pick maximizes the distance to the nearest already-selected point;
/// ties go to the lowest index. Selected indices are always distinct, even
/// when the cloud contains duplicate points.
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::contract(format!(
            "fps needs 1 <= m <= {n} points, got m = {m}"
        )));
    }
    if start >= n {
        return Err(Error::Index {
            op: "fps",
            index: start,
            len: n,
        });
    }
    let pts = cloud.points();
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut current = start;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == m {
            break;
        }
        let c = pts[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            let d = sqdist(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !selected[i] && min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(order)
}

/// For every point of `a`: the index of its nearest point in `b` and the
/// squared distance to it.
pub fn nearest(a: &PointCloud, b: &PointCloud) -> Vec<(usize, f64)> {
    a.points()
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in b.points().iter().enumerate() {
                let d = sqdist(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Chamfer distance variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `½ (mean ‖a − nn_b(a)‖ + mean ‖b − nn_a(b)‖)`.
    L1,
    /// `mean ‖a − nn_b(a)‖² + mean ‖b − nn_a(b)‖²`.
    L2,
}

impl Metric {
    /// Multiplier used when reporting: ×10³ for L1, ×10⁴ for L2.
    pub fn report_scale(self) -> f64 {
        match self {
            Metric::L1 => 1e3,
            Metric::L2 => 1e4,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(Metric::L1),
            "l2" | "L2" => Ok(Metric::L2),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

fn directional_value(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let nn = nearest(a, b);
    let total: f64 = nn
        .iter()
        .map(|&(_, d)| if squared { d } else { d.sqrt() })
        .sum();
    total / a.len() as f64
}

pub fn chamfer_value(metric: Metric, a: &PointCloud, b: &PointCloud) -> f64 {
    match metric {
        Metric::L1 => 0.5 * (directional_value(a, b, false) + directional_value(b, a, false)),
        Metric::L2 => directional_value(a, b, true) + directional_value(b, a, true),
    }
}

pub fn partial_matching_value(partial: &PointCloud, full: &PointCloud) -> f64 {
    directional_value(partial, full, false)
}

fn cloud_of(v: &Var<'_>) -> Result<PointCloud> {
    PointCloud::from_tensor(&v.value())
}

/// Mean (optionally square-rooted) distance from each row of `a` to its
/// nearest row of `b`, differentiable through the matched pairs.
fn directional<'g>(a: &Var<'g>, b: &Var<'g>, squared: bool) -> Result<Var<'g>> {
    let (pa, pb) = (cloud_of(a)?, cloud_of(b)?);
    let idx: Vec<usize> = nearest(&pa, &pb).into_iter().map(|(j, _)| j).collect();
    let diff = a.sub(&b.gather(&idx, 0)?)?;
    let sq = diff.mul(&diff)?.sum(1)?;
    Ok(if squared {
        sq.mean_all()
    } else {
        sq.sqrt().mean_all()
    })
}

pub fn chamfer_l1<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    Ok(directional(a, b, false)?
        .add(&directional(b, a, false)?)?
        .scale(0.5))
}

pub fn chamfer_l2<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    directional(a, b, true)?.add(&directional(b, a, true)?)
}

pub fn chamfer<'g>(metric: Metric, a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    match metric {
        Metric::L1 => chamfer_l1(a, b),
        Metric::L2 => chamfer_l2(a, b),
    }
}

/// One-directional matching loss: mean distance from each partial-input
/// point to the nearest point of `full`.
pub fn partial_matching<'g>(partial: &Var<'g>, full: &Var<'g>) -> Result<Var<'g>> {
    directional(partial, full, false)
}
