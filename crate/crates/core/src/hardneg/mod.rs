//! Hard-negative finetuning: the diffusion loss on positives plus a clipped
//! inverse loss on hard negatives.
//!
//! Per example, with `e_pos` and `e_neg` the mean squared noise errors of
//! the positive and the negative under the same `(t, eps)` draw:
//!
//! ```text
//! L = e_pos + max(-e_neg, -|lambda| * e_pos)
//! ```
//!
//! An example with several negatives averages their clipped terms.
//!
//! With `lambda = -1` the loss is never negative and stops pushing once the
//! negative is worse than the positive. Without the clip the negative term
//! is unbounded below.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::train::{draw, reduce_shards, validation_loss, validation_records, Noised};
use crate::diffusion::{Conditioning, Denoiser, Example, NoiseSchedule, ADAPTER_PREFIXES};
use crate::error::{Error, Result};
use crate::itm::{make_bank, text_retrieve, DenoiserScorer};
use crate::numerics::{adam_step, save_checkpoint, AdamConfig, AdamState, Tensor};
use crate::rng::derive_rng;
use crate::scenegen::{Dataset, DatasetRecord, Split};

pub const REPORT_FILE: &str = "finetune_report.json";
pub const SELECTED_FILE: &str = "finetuned.ckpt";
pub const DEFAULT_LAMBDA: f64 = -1.0;

/// Which negatives each positive is paired with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativeMix {
    /// Text negative kinds to draw from (names as stored in the dataset);
    /// empty means every kind the record has.
    pub text_kinds: Vec<String>,
    /// Caption negatives per positive, drawn without replacement.
    pub text_per_positive: usize,
    /// 0 or 1: whether the record's image hard negative (positive caption,
    /// mismatched image) is added.
    pub image_per_positive: usize,
}

impl Default for NegativeMix {
    fn default() -> Self {
        NegativeMix {
            text_kinds: Vec::new(),
            text_per_positive: 1,
            image_per_positive: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardNegConfig {
    /// Relative clip factor; only its magnitude enters the loss.
    pub lambda: f64,
    pub clip: bool,
    /// Drop the negative term entirely (plain finetuning on positives).
    pub no_neg: bool,
    /// Reuse the positive's `(t, eps)` draw for the negative.
    pub share_noise: bool,
    pub negatives: NegativeMix,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Conditioning dropout on positives; dropped examples carry no
    /// negative term.
    pub p_uncond: f64,
    /// Parameter-name prefixes that train; everything else is frozen.
    pub adapter: Vec<String>,
    pub seed: u64,
    pub shard_size: usize,
    /// Held-out records for hard-negative validation (0 = all).
    pub val_examples: usize,
    pub val_bank_size: usize,
    pub val_bank_seed: u64,
}

impl Default for HardNegConfig {
    fn default() -> Self {
        HardNegConfig {
            lambda: DEFAULT_LAMBDA,
            clip: true,
            no_neg: false,
            share_noise: true,
            negatives: NegativeMix::default(),
            lr: 5e-4,
            epochs: 8,
            batch_size: 32,
            p_uncond: 0.1,
            adapter: ADAPTER_PREFIXES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            shard_size: 8,
            val_examples: 256,
            val_bank_size: 10,
            val_bank_seed: 0,
        }
    }
}

impl HardNegConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.shard_size == 0 || self.val_bank_size == 0 {
            return Err(Error::invalid("epochs, batch_size, shard_size and val_bank_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::invalid("p_uncond must lie in [0, 1)"));
        }
        if self.negatives.image_per_positive > 1 {
            return Err(Error::invalid("each record has one image hard negative"));
        }
        if self.adapter.is_empty() {
            return Err(Error::invalid("empty adapter scope"));
        }
        Ok(())
    }

    pub fn trains(&self, name: &str) -> bool {
        self.adapter.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Loss of one example and its partial derivatives in `(e_pos, e_neg)`.
pub fn clipped_loss(e_pos: f64, e_neg: f64, lambda: f64, clip: bool) -> (f64, f64, f64) {
    let m = -lambda.abs() * e_pos;
    if clip && -e_neg < m {
        (e_pos + m, 1.0 - lambda.abs(), 0.0)
    } else {
        (e_pos - e_neg, 1.0, -1.0)
    }
}

/// A positive and its negatives, all already noised.
#[derive(Clone, Debug)]
pub struct HardNegExample {
    pub pos: Noised,
    pub negs: Vec<Noised>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Mean positive error.
    pub pos: f64,
    /// Mean error over all negatives.
    pub neg: f64,
    /// Fraction of negatives where the clip was active.
    pub clipped: f64,
}

/// Batch-mean loss and gradients for parameters accepted by `trainable`.
/// `lambda` has no default here: callers state it.
pub fn hardneg_loss(
    model: &Denoiser,
    batch: &[HardNegExample],
    lambda: Option<f64>,
    clip: bool,
    shard_size: usize,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(LossTerms, BTreeMap<String, Tensor>)> {
    let lambda = lambda.ok_or_else(|| Error::invalid("hard-negative loss needs an explicit lambda"))?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for ex in batch {
        if ex.negs.iter().any(|neg| neg.cond == ex.pos.cond && neg.x_t == ex.pos.x_t) {
            return Err(Error::invalid("negative equals its positive"));
        }
    }
    let n = batch.len() as f64;
    let shards: Vec<Result<((LossTerms, usize), BTreeMap<String, Tensor>)>> = batch
        .par_chunks(shard_size.max(1))
        .map(|shard| {
            let mut rows: Vec<Example<'_>> = shard.iter().map(|e| e.pos.example()).collect();
            let mut neg_rows = Vec::with_capacity(shard.len());
            for e in shard {
                let start = rows.len();
                rows.extend(e.negs.iter().map(Noised::example));
                neg_rows.push(start..rows.len());
            }
            let feeds = model.feeds(&rows);
            let graph = model.graph();
            let fwd = graph.forward(&model.params, &feeds.as_inputs())?;
            let err_id = graph.output_id("err").expect("err output");
            let err = fwd.value(err_id).data();
            let mut seed = vec![0.0; rows.len()];
            let mut terms = LossTerms::default();
            let mut negs = 0;
            for (i, range) in neg_rows.iter().enumerate() {
                let (mut l, mut dp) = (err[i], 1.0);
                if !range.is_empty() {
                    let m = range.len() as f64;
                    (l, dp) = (0.0, 0.0);
                    for j in range.clone() {
                        let (lj, dpj, dnj) = clipped_loss(err[i], err[j], lambda, clip);
                        l += lj / m;
                        dp += dpj / m;
                        seed[j] = dnj / m / n;
                        negs += 1;
                        terms.neg += err[j];
                        terms.clipped += f64::from(u8::from(dnj == 0.0));
                    }
                }
                seed[i] = dp / n;
                terms.total += l / n;
                terms.pos += err[i] / n;
            }
            let seed = Tensor::new(vec![rows.len()], seed)?;
            let grads = graph.backward_seeded(&fwd, err_id, &seed, trainable)?;
            Ok(((terms, negs), grads.params))
        })
        .collect();
    let mut terms = LossTerms::default();
    let mut negs = 0;
    let mut parts = Vec::with_capacity(shards.len());
    for s in shards {
        let ((t, k), g) = s?;
        terms.total += t.total;
        terms.pos += t.pos;
        terms.neg += t.neg;
        terms.clipped += t.clipped;
        negs += k;
        parts.push(Ok((0.0, g)));
    }
    let (_, grads) = reduce_shards(parts)?;
    if negs > 0 {
        terms.neg /= negs as f64;
        terms.clipped /= negs as f64;
    }
    Ok((terms, grads))
}

fn text_pool<'a>(record: &'a DatasetRecord, kinds: &[String]) -> Vec<&'a String> {
    record
        .text_negatives
        .iter()
        .filter(|(k, _)| kinds.is_empty() || kinds.contains(k))
        .map(|(_, v)| v)
        .collect()
}

/// The finetuning example for `record` in `epoch`, a pure function of the
/// config seed.
pub fn make_example(
    config: &HardNegConfig,
    dataset: &Dataset,
    record: &DatasetRecord,
    epoch: u64,
    schedule: &NoiseSchedule,
) -> Result<HardNegExample> {
    let mut rng = derive_rng(config.seed, "hardneg-example", (epoch << 32) | record.id);
    let d = draw(&mut rng, schedule.steps(), config.p_uncond);
    let cond = Conditioning::text(&record.caption)?;
    let x0 = dataset.image(record.image_index);
    let pos = Noised::new(x0.data(), &d, cond.clone(), schedule);
    if config.no_neg || d.null {
        return Ok(HardNegExample { pos, negs: Vec::new() });
    }
    let neg_draw = |rng: &mut _| {
        if config.share_noise {
            d.clone()
        } else {
            draw(rng, schedule.steps(), 0.0)
        }
    };
    let pool = text_pool(record, &config.negatives.text_kinds);
    let texts: Vec<&String> = pool
        .choose_multiple(&mut rng, config.negatives.text_per_positive)
        .copied()
        .collect();
    let mut negs = Vec::with_capacity(texts.len() + 1);
    for text in texts {
        let nd = neg_draw(&mut rng);
        negs.push(Noised::new(x0.data(), &nd, Conditioning::text(text)?, schedule));
    }
    if config.negatives.image_per_positive > 0 {
        let nd = neg_draw(&mut rng);
        let xn = dataset.image(record.negative_image_index);
        negs.push(Noised::new(xn.data(), &nd, cond, schedule));
    }
    Ok(HardNegExample { pos, negs })
}

/// Swap negatives only: the captions that differ from the positive purely
/// in binding or order.
fn is_swap_kind(kind: &str) -> bool {
    !kind.starts_with("substitute-")
}

/// Text-retrieval accuracy over `{positive} ∪ swap negatives` on held-out
/// records, one shared bank.
pub fn hardneg_val_accuracy(
    model: &Denoiser,
    dataset: &Dataset,
    records: &[&DatasetRecord],
    bank_size: usize,
    bank_seed: u64,
) -> Result<f64> {
    let bank = make_bank(bank_size, bank_seed, &NoiseSchedule::default())?;
    let scorer = DenoiserScorer::new(model);
    let hits: Vec<Result<Option<bool>>> = records
        .par_iter()
        .map(|r| {
            let mut caps = vec![Conditioning::text(&r.caption)?];
            for (k, v) in &r.text_negatives {
                if is_swap_kind(k) {
                    caps.push(Conditioning::text(v)?);
                }
            }
            if caps.len() < 2 {
                return Ok(None);
            }
            let ranking = text_retrieve(&scorer, &dataset.image(r.image_index), &caps, &bank)?;
            Ok(Some(ranking.top() == 0))
        })
        .collect();
    let mut n = 0usize;
    let mut correct = 0usize;
    for h in hits {
        if let Some(c) = h? {
            n += 1;
            correct += usize::from(c);
        }
    }
    if n == 0 {
        return Err(Error::invalid("no validation record has swap negatives"));
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: LossTerms,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub config: HardNegConfig,
    pub base_val_accuracy: f64,
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch with the highest validation accuracy, earliest on ties.
    pub selected_epoch: usize,
    /// Set when training stopped on a non-finite loss; the selection then
    /// covers the epochs completed before it.
    pub aborted: Option<String>,
}

pub fn select_epoch(epochs: &[FinetuneEpoch]) -> Option<usize> {
    let mut best: Option<&FinetuneEpoch> = None;
    for e in epochs {
        if best.is_none_or(|b| e.val_accuracy > b.val_accuracy) {
            best = Some(e);
        }
    }
    best.map(|e| e.epoch)
}

pub fn finetune_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("finetune-epoch-{epoch:03}.ckpt"))
}

pub struct FinetuneOutcome {
    /// Parameters of the selected epoch.
    pub model: Denoiser,
    pub report: FinetuneReport,
}

/// Finetune the adapter scope of `base`. Writes one checkpoint per epoch,
/// `finetuned.ckpt` (the selected epoch) and `finetune_report.json`.
pub fn finetune(config: &HardNegConfig, base: &Denoiser, dataset: &Dataset, out: &Path) -> Result<FinetuneOutcome> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let schedule = NoiseSchedule::default();
    let train: Vec<&DatasetRecord> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training records"));
    }
    let val = validation_records(dataset, config.val_examples);
    let base_val_accuracy =
        hardneg_val_accuracy(base, dataset, &val, config.val_bank_size, config.val_bank_seed)?;
    let mut model = base.clone();
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let trainable = |name: &str| config.trains(name);
    let mut epochs = Vec::new();
    let mut snapshots = vec![base.params.clone()];
    let mut aborted = None;
    'outer: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, "hardneg-shuffle", epoch as u64));
        let mut sum = LossTerms::default();
        for idx in order.chunks(config.batch_size) {
            let batch = idx
                .par_iter()
                .map(|&i| make_example(config, dataset, train[i], epoch as u64, &schedule))
                .collect::<Result<Vec<_>>>()?;
            let (terms, grads) = match hardneg_loss(
                &model,
                &batch,
                Some(config.lambda),
                config.clip,
                config.shard_size,
                &trainable,
            ) {
                Ok(v) => v,
                Err(Error::NonFinite { node, op }) => {
                    aborted = Some(format!("epoch {}: non-finite value at node {node} ({op})", epoch + 1));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() || grads.values().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                aborted = Some(format!("epoch {}: loss {}", epoch + 1, terms.total));
                break 'outer;
            }
            let w = batch.len() as f64 / train.len() as f64;
            sum.total += terms.total * w;
            sum.pos += terms.pos * w;
            sum.neg += terms.neg * w;
            sum.clipped += terms.clipped * w;
            adam_step(&mut model.params, &grads, &mut adam)?;
        }
        let val_accuracy = match hardneg_val_accuracy(&model, dataset, &val, config.val_bank_size, config.val_bank_seed) {
            Ok(a) => a,
            Err(Error::NonFinite { node, op }) => {
                aborted = Some(format!("epoch {}: non-finite value at node {node} ({op})", epoch + 1));
                break;
            }
            Err(e) => return Err(e),
        };
        save_checkpoint(&finetune_checkpoint(out, epoch + 1), &model.params)?;
        snapshots.push(model.params.clone());
        epochs.push(FinetuneEpoch {
            epoch: epoch + 1,
            loss: sum,
            val_accuracy,
        });
    }
    let selected_epoch = select_epoch(&epochs).unwrap_or(0);
    let selected = Denoiser::new(base.config.clone(), snapshots[selected_epoch].clone())?;
    save_checkpoint(&out.join(SELECTED_FILE), &selected.params)?;
    let report = FinetuneReport {
        config: config.clone(),
        base_val_accuracy,
        epochs,
        selected_epoch,
        aborted,
    };
    write_report(&out.join(REPORT_FILE), &report)?;
    Ok(FinetuneOutcome { model: selected, report })
}

pub fn write_report(path: &Path, report: &FinetuneReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<FinetuneReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub val_loss_before: f64,
    pub val_loss_after: f64,
    pub ratio: f64,
    /// `ratio` exceeds [`SANITY_THRESHOLD`].
    pub flagged: bool,
}

pub const SANITY_THRESHOLD: f64 = 1.25;

/// Held-out diffusion loss on positives before and after finetuning.
pub fn generative_sanity(before: &Denoiser, after: &Denoiser, dataset: &Dataset, val_examples: usize, seed: u64) -> Result<SanityReport> {
    let val = validation_records(dataset, val_examples);
    let schedule = NoiseSchedule::default();
    let b = validation_loss(before, dataset, &val, seed, &schedule)?;
    let a = validation_loss(after, dataset, &val, seed, &schedule)?;
    let ratio = a / b;
    Ok(SanityReport {
        val_loss_before: b,
        val_loss_after: a,
        ratio,
        flagged: ratio > SANITY_THRESHOLD,
    })
}
