//! Set-abstraction encoder mapping a partial cloud to a global shape code.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, GroupSize};
use crate::error::{Error, Result};
use crate::fused::group_max_linear;
use crate::geom::{fps, knn, PointCloud};
use crate::nn::{Bound, Linear, ParamStore};
use crate::spd::{repeat_indices, NeighborAttention};
use crate::tensor::{Tensor, Var};

/// Index of the lexicographically smallest point; ties go to the lower
/// index. Sampling from here makes the encoder independent of input order.
pub fn canonical_start(cloud: &PointCloud) -> usize {
    let pts = cloud.points();
    (0..pts.len())
        .min_by(|&a, &b| lexicographic(&pts[a], &pts[b]).then(a.cmp(&b)))
        .expect("non-empty cloud")
}

/// A cloud of centres with one feature row per centre.
pub struct Level<'g> {
    pub xyz: Var<'g>,
    pub features: Var<'g>,
}

fn debug_finite(v: &Var<'_>) {
    debug_assert!(v.value().is_finite(), "non-finite encoder activation");
}

/// Local attention with a residual: `x + Σ_l a_l ⊙ value(x_l)`.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    neighbors: usize,
    weights: NeighborAttention,
    value: Linear,
}

impl LocalAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        hidden: usize,
        neighbors: usize,
    ) -> Self {
        LocalAttention {
            neighbors,
            weights: NeighborAttention::new(store, rng, &format!("{name}.attn"), width, hidden),
            value: Linear::new(store, rng, &format!("{name}.value"), &[width], width),
        }
    }

    /// Returns the updated features and the `(N, k, D)` attention weights.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        cloud: &PointCloud,
        x: &Var<'g>,
    ) -> Result<(Var<'g>, Tensor)> {
        let nbr = knn(cloud, cloud, self.neighbors)?;
        let v = self.value.forward(p, &[*x])?;
        let (agg, w) = self.weights.attend(p, x, x, &v, &nbr)?;
        Ok((x.add(&agg)?, w))
    }
}

/// One set-abstraction level: a shared per-point layer over
/// `(relative xyz ‖ neighbour feature)` followed by a max over each group.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    count: usize,
    group: GroupSize,
    layer: Linear,
}

impl SetAbstraction {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        count: usize,
        group: GroupSize,
        in_width: usize,
        out_width: usize,
    ) -> Self {
        SetAbstraction {
            count,
            group,
            layer: Linear::new(store, rng, name, &[3, in_width], out_width),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, input: &Level<'g>) -> Result<Level<'g>> {
        let cloud = PointCloud::from_tensor(&input.xyz.value())?;
        let n = cloud.len();
        let w_xyz = p.var(self.layer.weights()[0]);
        let w_feat = p.var(self.layer.weights()[1]);
        let bias = p.var(self.layer.bias());
        match self.group {
            GroupSize::All => {
                // the single group is centred at the origin
                let h = input
                    .xyz
                    .matmul(&w_xyz)?
                    .add(&input.features.matmul(&w_feat)?)?
                    .add(&bias)?
                    .relu();
                let features = h.max(0)?.reshape(&[1, self.layer.out()])?;
                let xyz = input.xyz.graph().constant(Tensor::zeros([1, 3]));
                Ok(Level { xyz, features })
            }
            GroupSize::Knn(k) => {
                if self.count > n || k > n {
                    return Err(Error::contract(format!(
                        "set abstraction needs at least {} points, got {n}",
                        self.count.max(k)
                    )));
                }
                let centers = fps(&cloud, self.count, canonical_start(&cloud))?;
                let center_cloud = cloud.select(&centers)?;
                let nbr = knn(&center_cloud, &cloud, k)?;
                let xyz = input.xyz.gather(&centers, 0)?;
                let rel = input
                    .xyz
                    .gather(nbr.flat(), 0)?
                    .sub(&xyz.gather(&repeat_indices(self.count, k), 0)?)?;
                let projected = input.features.matmul(&w_feat)?;
                let features = group_max_linear(&rel, &projected, &w_xyz, &bias, &nbr)?;
                Ok(Level { xyz, features })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    min_points: usize,
    levels: Vec<SetAbstraction>,
    attention: Vec<LocalAttention>,
    projection: Linear,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        code_width: usize,
    ) -> Self {
        let mut levels = Vec::new();
        let mut attention = Vec::new();
        let mut width = 3;
        for (i, ((&count, &group), &out)) in cfg
            .point_counts
            .iter()
            .zip(&cfg.neighbor_counts)
            .zip(&cfg.channels)
            .enumerate()
        {
            let name = format!("enc.sa{}", i + 1);
            levels.push(SetAbstraction::new(
                store, rng, &name, count, group, width, out,
            ));
            if group != GroupSize::All {
                attention.push(LocalAttention::new(
                    store,
                    rng,
                    &format!("enc.la{}", i + 1),
                    out,
                    cfg.attention_hidden,
                    cfg.attention_neighbors,
                ));
            }
            width = out;
        }
        let projection = Linear::new(store, rng, "enc.proj", &[width], code_width);
        Encoder {
            min_points: cfg.min_points(),
            levels,
            attention,
            projection,
        }
    }

    pub fn min_points(&self) -> usize {
        self.min_points
    }

    pub fn levels(&self) -> &[SetAbstraction] {
        &self.levels
    }

    pub fn attention(&self) -> &[LocalAttention] {
        &self.attention
    }

    /// Shape code `1×C` of the cloud held in `xyz` (`N×3`).
    pub fn encode<'g>(&self, p: &Bound<'g>, xyz: &Var<'g>) -> Result<Var<'g>> {
        let n = xyz.shape()[0];
        if n < self.min_points {
            return Err(Error::contract(format!(
                "encoder needs at least {} input points, got {n}",
                self.min_points
            )));
        }
        let mut level = Level {
            xyz: *xyz,
            features: *xyz,
        };
        let mut attention = self.attention.iter();
        for sa in &self.levels {
            level = sa.forward(p, &level)?;
            debug_finite(&level.features);
            if sa.group != GroupSize::All {
                let block = attention.next().expect("one block per grouped level");
                let cloud = PointCloud::from_tensor(&level.xyz.value())?;
                level.features = block.forward(p, &cloud, &level.features)?.0;
                debug_finite(&level.features);
            }
        }
        let code = self.projection.forward(p, &[level.features])?;
        debug_finite(&code);
        Ok(code)
    }
}

/// Order in which `a` sorts before `b` lexicographically.
pub fn lexicographic(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}
