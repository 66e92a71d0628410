//! End-to-end gradient check on the micro model, run before training.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::geom::PointCloud;
use crate::gradcheck::{self, GradReport, STEP};
use crate::model::SnowflakeNet;
use crate::nn::{uniform, Bound};
use crate::tensor::Tensor;
use crate::training::loss::{loss_targets, total_loss};

pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Checks d(total loss)/d(input, every weight) of `cfg.micro()` with random
/// weights, input and ground truth drawn from `seed`. With `coords`, only
/// that many randomly chosen coordinates are differenced.
pub fn end_to_end(cfg: &RunConfig, seed: u64, coords: Option<usize>) -> Result<GradReport> {
    let micro = cfg.micro();
    let net = SnowflakeNet::new(&micro.model, &micro.encoder, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let partial = uniform(&[micro.data.partial_points, 3], 0.5, &mut rng);
    let gt = PointCloud::from_tensor(&uniform(&[micro.data.gt_points, 3], 0.5, &mut rng))?;
    let targets = loss_targets(&gt, &micro.model)?;
    let (metric, lambda) = (micro.loss.metric, micro.loss.lambda);

    let mut inputs: Vec<Tensor> = vec![partial];
    inputs.extend(net.params().values().iter().cloned());
    let f = gradcheck::func(|_, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let pred = net.forward(&p, &v[0])?;
        Ok(total_loss(metric, &pred, &targets, &v[0], lambda)?.total)
    });
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = match coords {
        Some(n) if n < all.len() => {
            let mut idx = sample(&mut rng, all.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };
    gradcheck::check_at(&f, &inputs, &chosen, STEP)
}
