//! The full completion network: encoder, seed generator and SPD layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, ModelConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::nn::{Bound, ParamStore};
use crate::seedgen::{merge_and_sample, SeedGenerator};
use crate::spd::Generator;
use crate::tensor::{Graph, Tensor, Var};

/// Every intermediate of one forward pass.
pub struct Prediction<'g> {
    pub code: Var<'g>,
    /// `P_c`.
    pub coarse: Var<'g>,
    /// `P_0`.
    pub seeds: Var<'g>,
    /// `P_1, P_2, P_3`.
    pub levels: Vec<Var<'g>>,
    pub displacements: Vec<Var<'g>>,
    /// Skip-transformer weights per SPD layer, absent in `no_att` mode.
    pub attention: Vec<Option<Tensor>>,
}

impl<'g> Prediction<'g> {
    /// The finest level, `P_3`.
    pub fn output(&self) -> Var<'g> {
        *self.levels.last().expect("three levels")
    }
}

/// Plain-value clouds of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub coarse: PointCloud,
    pub seeds: PointCloud,
    pub levels: Vec<PointCloud>,
}

impl Completion {
    pub fn output(&self) -> &PointCloud {
        self.levels.last().expect("three levels")
    }
}

#[derive(Clone, Debug)]
pub struct SnowflakeNet {
    model: ModelConfig,
    encoder_cfg: EncoderConfig,
    params: ParamStore,
    encoder: Encoder,
    seed: SeedGenerator,
    generator: Generator,
}

impl SnowflakeNet {
    /// Builds the network with weights drawn from `init_seed`.
    pub fn new(model: &ModelConfig, encoder: &EncoderConfig, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamStore::new();
        let enc = Encoder::new(&mut params, &mut rng, encoder, model.code_width);
        let seed = SeedGenerator::new(&mut params, &mut rng, model);
        let generator = Generator::new(&mut params, &mut rng, model);
        SnowflakeNet {
            model: model.clone(),
            encoder_cfg: encoder.clone(),
            params,
            encoder: enc,
            seed,
            generator,
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn seed_generator(&self) -> &SeedGenerator {
        &self.seed
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn min_input_points(&self) -> usize {
        self.encoder.min_points()
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, partial: &Var<'g>) -> Result<Prediction<'g>> {
        let n = partial.shape()[0];
        if n < self.min_input_points() {
            return Err(Error::contract(format!(
                "input has {n} points; the encoder needs at least {}",
                self.min_input_points()
            )));
        }
        let code = self.encoder.encode(p, partial)?;
        let (coarse, _) = self.seed.generate_coarse(p, &code)?;
        let seeds = merge_and_sample(&coarse, partial, self.model.n_seed)?;
        let outs = self.generator.forward(p, &seeds, &code)?;
        let mut levels = Vec::with_capacity(outs.len());
        let mut displacements = Vec::with_capacity(outs.len());
        let mut attention = Vec::with_capacity(outs.len());
        for o in outs {
            levels.push(o.cloud);
            displacements.push(o.displacement);
            attention.push(o.attention);
        }
        Ok(Prediction {
            code,
            coarse,
            seeds,
            levels,
            displacements,
            attention,
        })
    }

    /// Inference without gradient tracking.
    pub fn complete(&self, partial: &PointCloud) -> Result<Completion> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let pred = self.forward(&p, &g.constant(partial.to_tensor()))?;
        let cloud = |v: &Var<'_>| PointCloud::from_tensor(&v.value());
        Ok(Completion {
            coarse: cloud(&pred.coarse)?,
            seeds: cloud(&pred.seeds)?,
            levels: pred.levels.iter().map(cloud).collect::<Result<_>>()?,
        })
    }
}
