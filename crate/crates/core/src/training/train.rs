//! Mini-batch training with checkpointing and a per-step metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::model::SnowflakeNet;
use crate::pointio::DatasetEntry;
use crate::tensor::{Graph, Tensor};
use crate::training::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::training::loss::{loss_targets, total_loss};
use crate::training::optim::Adam;

pub const METRICS_LOG: &str = "metrics.log";
pub const FINAL_CHECKPOINT: &str = "ckpt_final";

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub net: SnowflakeNet,
    pub adam: Adam,
}

impl TrainState {
    /// Fresh weights drawn from `config.train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = SnowflakeNet::new(&config.model, &config.encoder, config.train.seed);
        let adam = Adam::new(&config.train, net.params());
        Ok(TrainState {
            config,
            step: 0,
            net,
            adam,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names = self.net.params().names();
        let mut arrays: Vec<(String, Tensor)> = names
            .iter()
            .cloned()
            .zip(self.net.params().values().iter().cloned())
            .collect();
        for (prefix, moments) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            arrays.extend(
                names
                    .iter()
                    .zip(moments)
                    .map(|(n, t)| (format!("{prefix}{n}"), t.clone())),
            );
        }
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            arrays,
        }
    }

    /// Rebuilds the network from the config echo and loads every array.
    pub fn from_checkpoint(mut ck: Checkpoint, path: &Path) -> Result<Self> {
        let mut state = TrainState::new(ck.config.clone())?;
        let names: Vec<String> = state.net.params().names().to_vec();
        let mut params = Vec::with_capacity(names.len());
        for name in &names {
            params.push((name.clone(), ck.take(path, name)?));
        }
        let mismatch = |e: Error| Error::Checkpoint {
            path: path.to_path_buf(),
            version: FORMAT_VERSION,
            message: format!("weights do not match the config echo: {e}"),
        };
        state.net.params_mut().load(params).map_err(mismatch)?;
        for (i, name) in names.iter().enumerate() {
            let m = ck.take(path, &format!("adam.m/{name}"))?;
            let v = ck.take(path, &format!("adam.v/{name}"))?;
            let shape = state.net.params().values()[i].shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(mismatch(Error::contract(format!(
                    "moment shapes for {name}"
                ))));
            }
            state.adam.m[i] = m;
            state.adam.v[i] = v;
        }
        if let Some((extra, _)) = ck.arrays.first() {
            return Err(mismatch(Error::contract(format!(
                "unexpected array {extra}"
            ))));
        }
        state.step = ck.step;
        state.adam.steps = ck.step;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }
}

/// A training pair with its fps-downsampled loss targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub partial: PointCloud,
    pub gt: PointCloud,
    pub targets: Vec<PointCloud>,
}

pub fn prepare<'a>(
    entries: impl IntoIterator<Item = &'a DatasetEntry>,
    net: &SnowflakeNet,
) -> Result<Vec<Sample>> {
    entries
        .into_iter()
        .map(|e| {
            if e.partial.len() < net.min_input_points() {
                return Err(Error::contract(format!(
                    "{}/{}: input has {} points; the encoder needs at least {}",
                    e.category,
                    e.id,
                    e.partial.len(),
                    net.min_input_points()
                )));
            }
            Ok(Sample {
                partial: e.partial.clone(),
                gt: e.gt.clone(),
                targets: loss_targets(&e.gt, net.model_config())?,
            })
        })
        .collect()
}

/// Sample indices for `step`, a pure function of `(seed, step)`: distinct
/// when `batch ≤ n`, otherwise every index once plus random repeats.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let mut idx = sample(&mut rng, n, batch.min(n)).into_vec();
    while idx.len() < batch {
        idx.push(rng.gen_range(0..n));
    }
    idx
}

/// Batch-averaged loss terms of one step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    /// Chamfer terms for `P_c, P_1, P_2, P_3`.
    pub cd: [f64; 4],
    pub preservation: f64,
}

impl StepMetrics {
    /// `step,total,cd_c,cd_1,cd_2,cd_3,preservation`.
    pub fn log_line(&self) -> String {
        let [c, a, b, d] = self.cd;
        format!(
            "{},{},{c},{a},{b},{d},{}",
            self.step, self.total, self.preservation
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let x = |i: usize| f[i].parse::<f64>().ok();
        Some(StepMetrics {
            step: f[0].parse().ok()?,
            total: x(1)?,
            cd: [x(2)?, x(3)?, x(4)?, x(5)?],
            preservation: x(6)?,
        })
    }
}

/// Loss and weight gradients for one sample.
fn sample_gradients(state: &TrainState, s: &Sample) -> Result<(StepMetrics, Vec<Tensor>)> {
    let cfg = &state.config;
    let g = Graph::new();
    let p = state.net.params().bind(&g, true);
    let partial = g.constant(s.partial.to_tensor());
    let pred = state.net.forward(&p, &partial)?;
    let terms = total_loss(
        cfg.loss.metric,
        &pred,
        &s.targets,
        &partial,
        cfg.loss.lambda,
    )?;
    g.backward(terms.total)?;
    let item = |v: &crate::tensor::Var<'_>| v.value().item();
    let metrics = StepMetrics {
        step: state.step,
        total: item(&terms.total),
        cd: std::array::from_fn(|i| item(&terms.chamfer[i])),
        preservation: item(&terms.preservation),
    };
    Ok((metrics, p.grads(state.net.params())?))
}

/// Loss terms of one sample without gradients.
pub fn sample_metrics(state: &TrainState, s: &Sample) -> Result<StepMetrics> {
    let cfg = &state.config;
    let g = Graph::new();
    let p = state.net.params().bind(&g, false);
    let partial = g.constant(s.partial.to_tensor());
    let pred = state.net.forward(&p, &partial)?;
    let terms = total_loss(
        cfg.loss.metric,
        &pred,
        &s.targets,
        &partial,
        cfg.loss.lambda,
    )?;
    let item = |v: &crate::tensor::Var<'_>| v.value().item();
    Ok(StepMetrics {
        step: state.step,
        total: item(&terms.total),
        cd: std::array::from_fn(|i| item(&terms.chamfer[i])),
        preservation: item(&terms.preservation),
    })
}

/// One optimizer step on the batch chosen by [`batch_indices`]; the loss is
/// the mean over the batch.
pub fn train_step(state: &mut TrainState, samples: &[Sample]) -> Result<StepMetrics> {
    if samples.is_empty() {
        return Err(Error::contract("training needs at least one sample"));
    }
    let batch = batch_indices(
        state.config.train.seed,
        state.step,
        samples.len(),
        state.config.train.batch_size,
    );
    let scale = 1.0 / batch.len() as f64;
    let mut sum: Option<(StepMetrics, Vec<Tensor>)> = None;
    for &i in &batch {
        let (m, g) = sample_gradients(state, &samples[i])?;
        sum = Some(match sum {
            None => (m, g),
            Some((mut acc_m, mut acc_g)) => {
                acc_m.total += m.total;
                for (a, b) in acc_m.cd.iter_mut().zip(m.cd) {
                    *a += b;
                }
                acc_m.preservation += m.preservation;
                for (a, b) in acc_g.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (acc_m, acc_g)
            }
        });
    }
    let (mut metrics, mut grads) = sum.expect("non-empty batch");
    metrics.total *= scale;
    metrics.cd = metrics.cd.map(|c| c * scale);
    metrics.preservation *= scale;
    for g in &mut grads {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    let grads: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
    state.adam.learning_rate = state.config.train.rate_at(state.step);
    state.adam.step(state.net.params_mut(), &grads)?;
    state.step += 1;
    Ok(metrics)
}

fn open_log(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    };
    Ok(BufWriter::new(file.map_err(|e| Error::io(path, e))?))
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step}"))
}

/// Trains until `state.step == until`, appending to `out/metrics.log`
/// (truncated when starting from step 0), writing `out/ckpt_<step>` every
/// `checkpoint_every` steps and `out/ckpt_final` at the end.
pub fn train(
    state: &mut TrainState,
    samples: &[Sample],
    out: &Path,
    until: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(METRICS_LOG);
    let mut log = open_log(&log_path, state.step == 0)?;
    let every = state.config.train.checkpoint_every;
    while state.step < until {
        let m = train_step(state, samples)?;
        writeln!(log, "{}", m.log_line()).map_err(|e| Error::io(&log_path, e))?;
        on_step(&m);
        if every > 0 && state.step.is_multiple_of(every) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&checkpoint_path(out, state.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&out.join(FINAL_CHECKPOINT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    fn micro_samples(n: usize, seed: u64) -> (RunConfig, Vec<Sample>) {
        let cfg = RunConfig::default().micro();
        let net = SnowflakeNet::new(&cfg.model, &cfg.encoder, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<DatasetEntry> = (0..n)
            .map(|i| DatasetEntry {
                category: "box".into(),
                id: format!("{i}"),
                split: crate::pointio::Split::Train,
                partial: PointCloud::from_tensor(&uniform(
                    &[cfg.data.partial_points, 3],
                    0.5,
                    &mut rng,
                ))
                .unwrap(),
                gt: PointCloud::from_tensor(&uniform(&[cfg.data.gt_points, 3], 0.5, &mut rng))
                    .unwrap(),
            })
            .collect();
        let samples = prepare(&entries, &net).unwrap();
        (cfg, samples)
    }

    #[test]
    fn batch_indices_are_pure_and_distinct() {
        let a = batch_indices(3, 17, 10, 4);
        assert_eq!(a, batch_indices(3, 17, 10, 4));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert_ne!(a, batch_indices(3, 18, 10, 4));
        let small = batch_indices(0, 0, 1, 4);
        assert_eq!(small, vec![0; 4]);
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = StepMetrics {
            step: 3,
            total: 0.5,
            cd: [0.1, 0.2, 0.3, 1e-7],
            preservation: 0.25,
        };
        assert_eq!(m.log_line(), "3,0.5,0.1,0.2,0.3,0.0000001,0.25");
        assert_eq!(StepMetrics::parse_line(&m.log_line()), Some(m));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (cfg, samples) = micro_samples(3, 1);
        let mut state = TrainState::new(cfg).unwrap();
        for _ in 0..2 {
            train_step(&mut state, &samples).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        state.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(back.net.params(), state.net.params());
        assert_eq!(back.adam, state.adam);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (mut cfg, samples) = micro_samples(5, 2);
        cfg.train.checkpoint_every = 3;
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let mut a = TrainState::new(cfg.clone()).unwrap();
        train(&mut a, &samples, &full, 6, |_| {}).unwrap();

        let part = dir.path().join("part");
        let mut b = TrainState::new(cfg).unwrap();
        train(&mut b, &samples, &part, 3, |_| {}).unwrap();
        let mut c = TrainState::load(&checkpoint_path(&part, 3)).unwrap();
        train(&mut c, &samples, &part, 6, |_| {}).unwrap();

        assert_eq!(c.net.params(), a.net.params());
        assert_eq!(c.adam, a.adam);
        let log = |d: &Path| std::fs::read_to_string(d.join(METRICS_LOG)).unwrap();
        assert_eq!(log(&part), log(&full));
        assert_eq!(
            std::fs::read(full.join(FINAL_CHECKPOINT)).unwrap(),
            std::fs::read(part.join(FINAL_CHECKPOINT)).unwrap()
        );
    }

    #[test]
    fn mismatched_checkpoint_is_versioned_error() {
        let (cfg, _) = micro_samples(1, 3);
        let state = TrainState::new(cfg.clone()).unwrap();
        let mut ck = state.to_checkpoint();
        ck.config.model.feature_width += 1;
        let err = TrainState::from_checkpoint(ck, Path::new("m")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Checkpoint {
                    version: FORMAT_VERSION,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn loss_decreases_on_micro_model() {
        let (mut cfg, samples) = micro_samples(2, 4);
        cfg.train.batch_size = 2;
        let mut state = TrainState::new(cfg).unwrap();
        let first = train_step(&mut state, &samples).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut state, &samples).unwrap();
        }
        assert!(
            last.total < first.total,
            "{} vs {}",
            last.total,
            first.total
        );
    }
}
