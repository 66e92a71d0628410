//! Run configuration, read from TOML with unknown keys rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geom::Metric;

/// How SPD layers connect through the skip-transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Previous displacement features are the attention keys.
    Full,
    /// Keys are the current per-point features.
    SelfAtt,
    /// Unweighted mean of neighbour values, no attention.
    NoAtt,
    /// Previous displacement features are never passed on.
    NoConnect,
}

impl SkipMode {
    pub const ALL: [SkipMode; 4] = [
        SkipMode::Full,
        SkipMode::SelfAtt,
        SkipMode::NoAtt,
        SkipMode::NoConnect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkipMode::Full => "full",
            SkipMode::SelfAtt => "self_att",
            SkipMode::NoAtt => "no_att",
            SkipMode::NoConnect => "no_connect",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != SkipMode::NoAtt
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SkipMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown skip_mode {s:?}")))
    }
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Neighbourhood size of one set-abstraction level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupSize {
    /// A single group holding every input point.
    All,
    Knn(usize),
}

impl Serialize for GroupSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GroupSize::All => s.serialize_str("all"),
            GroupSize::Knn(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for GroupSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = GroupSize;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive neighbour count or \"all\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<GroupSize, E> {
                Ok(GroupSize::Knn(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<GroupSize, E> {
                usize::try_from(v)
                    .map(GroupSize::Knn)
                    .map_err(|_| E::custom(format!("negative neighbour count {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<GroupSize, E> {
                if v == "all" {
                    Ok(GroupSize::All)
                } else {
                    Err(E::custom(format!("expected \"all\", got {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Coarse points produced from the shape code (N_c).
    pub n_coarse: usize,
    /// Seed points after merging with the input (N_0).
    pub n_seed: usize,
    /// Upsampling factor of each SPD layer.
    pub factors: Vec<usize>,
    /// Width of the shape code (C).
    pub code_width: usize,
    /// Per-point feature width in the decoder (C′).
    pub feature_width: usize,
    /// Neighbours attended to by the skip-transformer.
    pub skip_neighbors: usize,
    /// Hidden width of the attention-logit MLP.
    pub attention_hidden: usize,
    pub skip_mode: SkipMode,
    /// Permit a first factor other than 1.
    pub allow_r1_override: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_coarse: 64,
            n_seed: 64,
            factors: vec![1, 2, 4],
            code_width: 512,
            feature_width: 32,
            skip_neighbors: 8,
            attention_hidden: 16,
            skip_mode: SkipMode::Full,
            allow_r1_override: false,
        }
    }
}

impl ModelConfig {
    /// Point counts of P_1, P_2, P_3.
    pub fn level_counts(&self) -> Vec<usize> {
        self.factors
            .iter()
            .scan(self.n_seed, |n, r| {
                *n *= r;
                Some(*n)
            })
            .collect()
    }

    pub fn output_points(&self) -> usize {
        self.level_counts().last().copied().unwrap_or(self.n_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub point_counts: Vec<usize>,
    pub neighbor_counts: Vec<GroupSize>,
    pub channels: Vec<usize>,
    pub attention_neighbors: usize,
    pub attention_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            point_counts: vec![256, 64, 1],
            neighbor_counts: vec![GroupSize::Knn(16), GroupSize::Knn(16), GroupSize::All],
            channels: vec![64, 128, 512],
            attention_neighbors: 8,
            attention_hidden: 16,
        }
    }
}

impl EncoderConfig {
    /// Fewest input points the encoder accepts.
    pub fn min_points(&self) -> usize {
        let k = match self.neighbor_counts.first() {
            Some(GroupSize::Knn(k)) => *k,
            _ => 1,
        };
        self.point_counts.first().copied().unwrap_or(1).max(k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the preservation term (λ).
    pub lambda: f64,
    pub metric: Metric,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            metric: Metric::L2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds weight init and batch order.
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `learning_rate` towards 0 at `steps`.
    Linear,
}

impl TrainConfig {
    /// Step size used for the update at `step` (0-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                let left = self.steps.saturating_sub(step) as f64 / self.steps.max(1) as f64;
                self.learning_rate * left
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 1000,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub gt_points: usize,
    pub partial_points: usize,
    pub shapes_per_category: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gt_points: 512,
            partial_points: 256,
            shapes_per_category: 50,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.n_coarse", m.n_coarse)?;
        positive("model.n_seed", m.n_seed)?;
        positive("model.code_width", m.code_width)?;
        positive("model.feature_width", m.feature_width)?;
        positive("model.skip_neighbors", m.skip_neighbors)?;
        positive("model.attention_hidden", m.attention_hidden)?;
        if m.n_seed < m.n_coarse {
            return Err(Error::Config(format!(
                "model.n_seed ({}) must be at least model.n_coarse ({})",
                m.n_seed, m.n_coarse
            )));
        }
        if m.factors.len() != 3 {
            return Err(Error::Config(format!(
                "model.factors needs three entries, got {}",
                m.factors.len()
            )));
        }
        for &r in &m.factors {
            positive("model.factors entry", r)?;
        }
        if m.factors[0] != 1 && !m.allow_r1_override {
            return Err(Error::Config(format!(
                "model.factors[0] must be 1 (got {}); set allow_r1_override to change it",
                m.factors[0]
            )));
        }
        if m.skip_neighbors > m.n_seed {
            return Err(Error::Config(format!(
                "model.skip_neighbors ({}) exceeds model.n_seed ({})",
                m.skip_neighbors, m.n_seed
            )));
        }

        let e = &self.encoder;
        let levels = e.point_counts.len();
        if levels == 0 || e.neighbor_counts.len() != levels || e.channels.len() != levels {
            return Err(Error::Config(
                "encoder.point_counts, neighbor_counts and channels need equal, non-zero lengths"
                    .into(),
            ));
        }
        for w in e.point_counts.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!(
                    "encoder.point_counts must be strictly decreasing, got {:?}",
                    e.point_counts
                )));
            }
        }
        if e.point_counts[levels - 1] != 1 || e.neighbor_counts[levels - 1] != GroupSize::All {
            return Err(Error::Config(
                "the last encoder level must pool everything to one point (count 1, neighbors \"all\")"
                    .into(),
            ));
        }
        for (i, g) in e.neighbor_counts[..levels - 1].iter().enumerate() {
            match g {
                GroupSize::All => {
                    return Err(Error::Config(format!(
                        "encoder level {i}: only the last level may group all points"
                    )))
                }
                GroupSize::Knn(k) => {
                    positive("encoder.neighbor_counts entry", *k)?;
                    if i > 0 && *k > e.point_counts[i - 1] {
                        return Err(Error::Config(format!(
                            "encoder level {i}: {k} neighbours but only {} points",
                            e.point_counts[i - 1]
                        )));
                    }
                }
            }
        }
        for &c in &e.channels {
            positive("encoder.channels entry", c)?;
        }
        positive("encoder.attention_neighbors", e.attention_neighbors)?;
        positive("encoder.attention_hidden", e.attention_hidden)?;
        if levels > 1 && e.attention_neighbors > e.point_counts[levels - 2] {
            return Err(Error::Config(format!(
                "encoder.attention_neighbors ({}) exceeds the smallest attended level ({} points)",
                e.attention_neighbors,
                e.point_counts[levels - 2]
            )));
        }

        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be finite and non-negative, got {}",
                self.loss.lambda
            )));
        }

        let t = &self.train;
        positive("train.batch_size", t.batch_size)?;
        let valid = t.learning_rate > 0.0
            && t.epsilon > 0.0
            && (0.0..1.0).contains(&t.beta1)
            && (0.0..1.0).contains(&t.beta2);
        if !valid {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }

        let d = &self.data;
        positive("data.gt_points", d.gt_points)?;
        positive("data.partial_points", d.partial_points)?;
        positive("data.shapes_per_category", d.shapes_per_category)?;
        if !(0.0..=1.0).contains(&d.train_fraction) {
            return Err(Error::Config(
                "data.train_fraction must lie in [0, 1]".into(),
            ));
        }
        if d.partial_points < e.min_points() {
            return Err(Error::Config(format!(
                "data.partial_points ({}) is below the encoder minimum ({})",
                d.partial_points,
                e.min_points()
            )));
        }
        let largest = m.output_points().max(m.n_coarse).max(m.n_seed);
        if d.gt_points < largest {
            return Err(Error::Config(format!(
                "data.gt_points ({}) is below the largest prediction ({largest})",
                d.gt_points
            )));
        }
        if m.n_coarse + d.partial_points < m.n_seed {
            return Err(Error::Config(
                "model.n_coarse + data.partial_points must cover model.n_seed".into(),
            ));
        }
        Ok(())
    }

    /// The tiny model used for pre-training gradient checks: N_0 = 8,
    /// factors (1, 2, 2), C′ = 8, with a matching small encoder.
    pub fn micro(&self) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                n_coarse: 8,
                n_seed: 8,
                factors: vec![1, 2, 2],
                code_width: 8,
                feature_width: 8,
                skip_neighbors: 4,
                attention_hidden: 4,
                skip_mode: self.model.skip_mode,
                allow_r1_override: false,
            },
            encoder: EncoderConfig {
                point_counts: vec![16, 8, 1],
                neighbor_counts: vec![GroupSize::Knn(4), GroupSize::Knn(4), GroupSize::All],
                channels: vec![8, 8, 8],
                attention_neighbors: 4,
                attention_hidden: 4,
            },
            loss: self.loss.clone(),
            train: self.train.clone(),
            data: DataConfig {
                gt_points: 32,
                partial_points: 16,
                shapes_per_category: 1,
                train_fraction: 1.0,
            },
        }
    }
}
