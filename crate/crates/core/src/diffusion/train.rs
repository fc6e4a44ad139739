//! Generative training on image/caption pairs.
//!
//! Per-example randomness (timestep, noise, conditioning dropout) is drawn
//! from a stream keyed by `(seed, epoch, record id)`, so the loss of a batch
//! does not depend on the order of its examples. Batches are split into
//! fixed-size shards that may run on different threads; shard gradients are
//! summed in shard order, which keeps results bit-identical for any thread
//! count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Denoiser, DenoiserConfig, Example};
use super::schedule::{noise_into, NoiseSchedule};
use super::text::Conditioning;
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, ParamStore, Tensor,
};
use crate::rng::derive_rng;
use crate::scenegen::{parse, Dataset, DatasetRecord, Split, CHANNELS, IMAGE_SIZE};

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "train_config.txt";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const FINAL_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_uncond: f64,
    pub seed: u64,
    /// Examples per parallel work unit. Part of the numerical definition of
    /// a run: changing it changes the summation order.
    pub shard_size: usize,
    /// Validation examples used for the per-epoch val loss (0 = all).
    pub val_examples: usize,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            batch_size: 32,
            epochs: 30,
            p_uncond: 0.1,
            seed: 0,
            shard_size: 8,
            val_examples: 512,
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::invalid("p_uncond must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.shard_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size, shard_size and epochs must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Noise level, noise and dropout decision for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<f64>,
    pub null: bool,
}

pub fn draw<R: Rng>(rng: &mut R, steps: usize, p_uncond: f64) -> Draw {
    let t = rng.random_range(0..steps);
    let eps = Tensor::randn(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], 1.0, rng).into_data();
    let null = p_uncond > 0.0 && rng.random::<f64>() < p_uncond;
    Draw { t, eps, null }
}

/// Draw for training example `record` in `epoch`.
pub fn example_draw(seed: u64, epoch: u64, record: u64, steps: usize, p_uncond: f64) -> Draw {
    let mut rng = derive_rng(seed, "train-example", (epoch << 32) | record);
    draw(&mut rng, steps, p_uncond)
}

/// A noised example ready for the network.
#[derive(Clone, Debug)]
pub struct Noised {
    pub x_t: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: usize,
    pub cond: Conditioning,
}

impl Noised {
    pub fn new(x0: &[f64], draw: &Draw, cond: Conditioning, schedule: &NoiseSchedule) -> Noised {
        let mut x_t = vec![0.0; x0.len()];
        noise_into(x0, &draw.eps, schedule.coefficients(draw.t), &mut x_t);
        let cond = if draw.null { Conditioning::Null } else { cond };
        Noised {
            x_t,
            eps: draw.eps.clone(),
            t: draw.t,
            cond,
        }
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            x_t: &self.x_t,
            target: &self.eps,
            t: self.t,
            cond: &self.cond,
        }
    }
}

/// Mean over examples of the per-example mean squared noise error, and its
/// gradient for parameters accepted by `trainable`.
pub fn diffusion_loss(
    model: &Denoiser,
    batch: &[Noised],
    shard_size: usize,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let shards: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
        .par_chunks(shard_size.max(1))
        .map(|shard| {
            let examples: Vec<Example<'_>> = shard.iter().map(Noised::example).collect();
            let feeds = model.feeds(&examples);
            let graph = model.graph();
            let fwd = graph.forward(&model.params, &feeds.as_inputs())?;
            let loss_id = graph.output_id("loss").expect("loss output");
            let grads = graph.backward_filtered(&fwd, loss_id, trainable)?;
            let w = shard.len() as f64 / n;
            Ok((fwd.value(loss_id).item() * w, scale_map(grads.params, w)))
        })
        .collect();
    reduce_shards(shards)
}

fn scale_map(mut m: BTreeMap<String, Tensor>, w: f64) -> BTreeMap<String, Tensor> {
    for g in m.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= w);
    }
    m
}

/// Sum shard results in order.
pub(crate) fn reduce_shards(
    shards: Vec<Result<(f64, BTreeMap<String, Tensor>)>>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for shard in shards {
        let (l, grads) = shard?;
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.axpy(1.0, &g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    Ok((loss, total))
}

/// Conditional error on positives with a fixed draw per record: the
/// held-out loss reported each epoch.
pub fn validation_loss(
    model: &Denoiser,
    dataset: &Dataset,
    records: &[&DatasetRecord],
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no validation records"));
    }
    let chunk = 32;
    let parts: Vec<Result<f64>> = records
        .par_chunks(chunk)
        .map(|recs| {
            let batch = recs
                .iter()
                .map(|r| {
                    let mut rng = derive_rng(seed, "val-example", r.id);
                    let d = draw(&mut rng, schedule.steps(), 0.0);
                    let cond = Conditioning::text(&r.caption)?;
                    Ok(Noised::new(dataset.image(r.image_index).data(), &d, cond, schedule))
                })
                .collect::<Result<Vec<_>>>()?;
            let ex: Vec<_> = batch.iter().map(Noised::example).collect();
            Ok(model.errors(&ex)?.iter().sum())
        })
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?;
    }
    Ok(sum / records.len() as f64)
}

pub fn validation_records<'a>(dataset: &'a Dataset, cap: usize) -> Vec<&'a DatasetRecord> {
    let val: Vec<_> = dataset.split(Split::Val).collect();
    let n = if cap == 0 { val.len() } else { cap.min(val.len()) };
    val[..n].to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub log: Vec<EpochLog>,
    /// Val loss of the initial parameters.
    pub initial_val_loss: f64,
}

/// Everything needed to continue a run: parameters and optimizer moments,
/// stored as one checkpoint with `p/`, `m/` and `v/` prefixes.
fn save_state(path: &Path, model: &Denoiser, adam: &AdamState, epoch: usize) -> Result<()> {
    let mut store = ParamStore::new();
    for (k, v) in model.params.iter() {
        store.insert(format!("p/{k}"), v.clone());
    }
    for (k, v) in &adam.first {
        store.insert(format!("m/{k}"), v.clone());
    }
    for (k, v) in &adam.second {
        store.insert(format!("v/{k}"), v.clone());
    }
    store.insert("meta/step", Tensor::scalar(adam.step as f64));
    store.insert("meta/epoch", Tensor::scalar(epoch as f64));
    save_checkpoint(path, &store)
}

fn load_state(path: &Path, config: &TrainConfig) -> Result<(Denoiser, AdamState, usize)> {
    let store = load_checkpoint(path)?;
    let mut params = ParamStore::new();
    let mut adam = AdamState::new(config.adam());
    let mut epoch = 0;
    for (k, v) in store.iter() {
        if let Some(name) = k.strip_prefix("p/") {
            params.insert(name, v.clone());
        } else if let Some(name) = k.strip_prefix("m/") {
            adam.first.insert(name.to_string(), v.clone());
        } else if let Some(name) = k.strip_prefix("v/") {
            adam.second.insert(name.to_string(), v.clone());
        } else if k == "meta/step" {
            adam.step = v.item() as u64;
        } else if k == "meta/epoch" {
            epoch = v.item() as usize;
        }
    }
    Ok((Denoiser::new(config.model.clone(), params)?, adam, epoch))
}

pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch-{epoch:03}.ckpt"))
}

fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad log row `{line}`"),
        };
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: f[1].parse().map_err(|_| bad())?,
            val_loss: f[2].parse().map_err(|_| bad())?,
            wall_seconds: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,wall_seconds\n");
    for e in log {
        s += &format!("{},{},{},{:.3}\n", e.epoch, e.train_loss, e.val_loss, e.wall_seconds);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Train from scratch, or resume from `out/train_state.ckpt` when present.
///
/// Writes `train_config.txt`, `train_log.csv`, one parameter checkpoint per
/// epoch and `model.ckpt` (the final parameters) under `out`. A resumed run
/// produces the same final parameters as an uninterrupted one.
pub fn train(config: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, crate::kv::to_kv(config)?).map_err(|e| Error::io(&config_path, e))?;

    let schedule = NoiseSchedule::default();
    let train_records: Vec<&DatasetRecord> = dataset.split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::invalid("dataset has no training records"));
    }
    let conds: Vec<Conditioning> = train_records
        .iter()
        .map(|r| Conditioning::caption(&parse(&r.caption)?))
        .collect::<Result<_>>()?;
    let val = validation_records(dataset, config.val_examples);

    let state_path = out.join(STATE_FILE);
    let log_path = out.join(LOG_FILE);
    let (mut model, mut adam, start_epoch, mut log, initial_val_loss) = if state_path.exists() {
        let (model, adam, epoch) = load_state(&state_path, config)?;
        let log = read_log(&log_path)?;
        let init = Denoiser::init(config.model.clone(), config.seed)?;
        let initial = validation_loss(&init, dataset, &val, config.seed, &schedule)?;
        (model, adam, epoch, log, initial)
    } else {
        let model = Denoiser::init(config.model.clone(), config.seed)?;
        let initial = validation_loss(&model, dataset, &val, config.seed, &schedule)?;
        (model, AdamState::new(config.adam()), 0, Vec::new(), initial)
    };
    log.truncate(start_epoch);

    let all = |_: &str| true;
    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<Noised> = batch_idx
                .par_iter()
                .map(|&i| {
                    let r = train_records[i];
                    let d = example_draw(config.seed, epoch as u64, r.id, schedule.steps(), config.p_uncond);
                    Noised::new(dataset.image(r.image_index).data(), &d, conds[i].clone(), &schedule)
                })
                .collect();
            let (loss, grads) = diffusion_loss(&model, &batch, config.shard_size, &all)
                .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("train loss {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut model.params, &grads, &mut adam)?;
        }
        let val_loss = validation_loss(&model, dataset, &val, config.seed, &schedule)
            .map_err(|e| diverged(epoch, e))?;
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train_records.len() as f64,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        save_checkpoint(&epoch_checkpoint(out, epoch + 1), &model.params)?;
        write_log(&log_path, &log)?;
        save_state(&state_path, &model, &adam, epoch + 1)?;
    }
    save_checkpoint(&out.join(FINAL_FILE), &model.params)?;
    Ok(TrainOutcome {
        model,
        log,
        initial_val_loss,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => Error::Diverged {
            epoch,
            detail: format!("non-finite value at node {node} ({op})"),
        },
        other => other,
    }
}

/// Load a parameter checkpoint into a model of the given architecture.
pub fn load_model(path: &Path, config: &DenoiserConfig) -> Result<Denoiser> {
    Denoiser::new(config.clone(), load_checkpoint(path)?)
}
