//! Seed generation: a coarse complete cloud from the shape code, merged with
//! the input and resampled to the seed count.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::{fps, PointCloud};
use crate::nn::{uniform, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::spd::pointwise_split;
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct SeedGenerator {
    n_coarse: usize,
    head: Linear,
    kernels: ParamId,
    fuse: Linear,
    coords: Mlp,
}

impl SeedGenerator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.feature_width;
        SeedGenerator {
            n_coarse: cfg.n_coarse,
            head: Linear::new(store, rng, "seed.head", &[cfg.code_width], c),
            kernels: store.add(
                "seed.kernels",
                uniform(&[c, cfg.n_coarse * c], 1.0 / (c as f64).sqrt(), rng),
            ),
            fuse: Linear::new(store, rng, "seed.fuse", &[c, cfg.code_width], c),
            coords: Mlp::new(store, rng, "seed.coords", &[c], &[c, 3]),
        }
    }

    pub fn kernels(&self) -> ParamId {
        self.kernels
    }

    /// Coarse points `P_c` (`N_c×3`, inside the open unit cube) and their
    /// features (`N_c×C′`).
    pub fn generate_coarse<'g>(&self, p: &Bound<'g>, code: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        if code.shape()[0] != 1 {
            return Err(Error::shape("generate_coarse", &code.shape(), &[1, 0]));
        }
        let parent = self.head.forward(p, &[*code])?;
        let children = pointwise_split(&parent, &p.var(self.kernels), self.n_coarse)?;
        let features = self.fuse.forward(p, &[children, *code])?.relu();
        let points = self.coords.forward(p, &[features])?.tanh();
        Ok((points, features))
    }
}

/// Indices into `coarse ‖ partial` chosen by fps (start 0) to form the seeds.
pub fn merge_indices(
    coarse: &PointCloud,
    partial: &PointCloud,
    n_seed: usize,
) -> Result<Vec<usize>> {
    let total = coarse.len() + partial.len();
    if total < n_seed {
        return Err(Error::contract(format!(
            "merging {} coarse and {} input points cannot yield {n_seed} seeds",
            coarse.len(),
            partial.len()
        )));
    }
    fps(&coarse.concat(partial), n_seed, 0)
}

/// `P_0`: fps over the concatenation of `coarse` and `partial`.
pub fn merge_and_sample<'g>(coarse: &Var<'g>, partial: &Var<'g>, n_seed: usize) -> Result<Var<'g>> {
    let idx = merge_indices(
        &PointCloud::from_tensor(&coarse.value())?,
        &PointCloud::from_tensor(&partial.value())?,
        n_seed,
    )?;
    Var::concat(&[*coarse, *partial], 0)?.gather(&idx, 0)
}
