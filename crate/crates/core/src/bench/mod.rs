//! Task-suite evaluation, sample-budget sweeps and result comparison.
//!
//! Scoring collects per-bank-entry errors once and derives every statistic
//! from them. Because banks are nested, the accuracy at bank size `m` is
//! computed from the first `m` entries of a larger bank and equals a
//! separate run at size `m`.

pub mod report;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{Conditioning, NoiseSchedule};
use crate::error::{Error, Result};
use crate::itm::{make_bank, BankSpec, ErrorModel, NoiseBank, Ranking};
use crate::scenegen::{Direction, ImageTensor, Item, Subtask, TaskInstance, TaskSuite};
pub use stats::{binomial_band, bootstrap_mean_ci, intervals_overlap, wilson, Z95};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Text,
    ImageNaive,
    ImageNormalized,
    TextGraynorm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Text, Mode::ImageNaive, Mode::ImageNormalized, Mode::TextGraynorm];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::ImageNaive => "image-naive",
            Mode::ImageNormalized => "image-normalized",
            Mode::TextGraynorm => "text-graynorm",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Mode::Text | Mode::TextGraynorm => Direction::TextRetrieval,
            Mode::ImageNaive | Mode::ImageNormalized => Direction::ImageRetrieval,
        }
    }

    fn needs(self) -> Needs {
        Needs {
            uncond: true,
            gray: self == Mode::TextGraynorm,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown mode `{s}` (text, image-naive, image-normalized, text-graynorm)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Needs {
    pub uncond: bool,
    pub gray: bool,
}

/// Per-entry errors of one candidate. For text retrieval `uncond` is the
/// query image's unconditional error, identical across candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateErrors {
    pub cond: Vec<f64>,
    #[serde(default)]
    pub uncond: Vec<f64>,
    #[serde(default)]
    pub gray: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceErrors {
    pub id: u64,
    pub subtask: Subtask,
    pub direction: Direction,
    pub gold: usize,
    pub bank_id: String,
    pub candidates: Vec<CandidateErrors>,
}

fn prefix_mean(v: &[f64], n: usize) -> f64 {
    v[..n].iter().sum::<f64>() / n as f64
}

impl InstanceErrors {
    /// Candidate scores for `mode` using the first `n` bank entries.
    pub fn scores(&self, mode: Mode, n: usize) -> Result<Vec<f64>> {
        if mode.direction() != self.direction {
            return Err(Error::invalid(format!("mode {mode} does not apply to instance {}", self.id)));
        }
        self.candidates
            .iter()
            .map(|c| {
                if n == 0 || n > c.cond.len() {
                    return Err(Error::invalid(format!("bank prefix {n} of {}", c.cond.len())));
                }
                let cond = prefix_mean(&c.cond, n);
                match mode {
                    Mode::Text | Mode::ImageNaive => Ok(cond),
                    Mode::ImageNormalized => {
                        if c.uncond.len() < n {
                            return Err(Error::invalid("unconditional errors were not collected"));
                        }
                        Ok(cond - prefix_mean(&c.uncond, n))
                    }
                    Mode::TextGraynorm => {
                        if c.gray.len() < n {
                            return Err(Error::invalid("gray-image errors were not collected"));
                        }
                        Ok(cond - prefix_mean(&c.gray, n))
                    }
                }
            })
            .collect()
    }

    pub fn bank_size(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.cond.len())
    }
}

pub fn caption_cond(item: &Item) -> Result<Conditioning> {
    let text = item
        .caption()
        .ok_or_else(|| Error::invalid("expected a caption item"))?;
    Conditioning::text(text)
}

fn image_of(suite: &TaskSuite, item: &Item) -> Result<ImageTensor> {
    let slot = item
        .image_slot()
        .ok_or_else(|| Error::invalid("expected an image item"))?;
    Ok(suite.image(slot))
}

fn instance_errors(
    model: &dyn ErrorModel,
    suite: &TaskSuite,
    t: &TaskInstance,
    needs: Needs,
    bank: &NoiseBank,
    gray: &GrayErrors,
) -> Result<InstanceErrors> {
    let candidates = match t.direction {
        Direction::TextRetrieval => {
            let x = image_of(suite, &t.query)?;
            let uncond = if needs.uncond {
                model.entry_errors(&x, &Conditioning::Null, bank)?
            } else {
                Vec::new()
            };
            t.candidates
                .iter()
                .map(|c| {
                    let w = caption_cond(c)?;
                    Ok(CandidateErrors {
                        cond: model.entry_errors(&x, &w, bank)?,
                        uncond: uncond.clone(),
                        gray: if needs.gray { gray.get(model, &w, bank)? } else { Vec::new() },
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Direction::ImageRetrieval => {
            let w = caption_cond(&t.query)?;
            t.candidates
                .iter()
                .map(|c| {
                    let x = image_of(suite, c)?;
                    Ok(CandidateErrors {
                        cond: model.entry_errors(&x, &w, bank)?,
                        uncond: if needs.uncond {
                            model.entry_errors(&x, &Conditioning::Null, bank)?
                        } else {
                            Vec::new()
                        },
                        gray: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(InstanceErrors {
        id: t.id,
        subtask: t.subtask,
        direction: t.direction,
        gold: t.gold,
        bank_id: bank.id(),
        candidates,
    })
}

/// Per-caption gray-image errors, computed once per caption and bank.
#[derive(Default)]
struct GrayErrors {
    cache: std::sync::Mutex<BTreeMap<Vec<usize>, Vec<f64>>>,
}

impl GrayErrors {
    fn get(&self, model: &dyn ErrorModel, w: &Conditioning, bank: &NoiseBank) -> Result<Vec<f64>> {
        let key = w.ids().to_vec();
        if let Some(v) = self.cache.lock().expect("gray cache").get(&key) {
            return Ok(v.clone());
        }
        let v = model.entry_errors(&ImageTensor::gray(), w, bank)?;
        self.cache.lock().expect("gray cache").insert(key, v.clone());
        Ok(v)
    }
}

/// Score every instance of `direction` under one shared bank.
pub fn collect_errors(
    model: &dyn ErrorModel,
    suite: &TaskSuite,
    direction: Direction,
    needs: Needs,
    bank: &NoiseBank,
) -> Result<Vec<InstanceErrors>> {
    let instances: Vec<&TaskInstance> = suite.direction(direction).collect();
    if instances.is_empty() {
        return Err(Error::invalid(format!("suite has no {direction:?} instances")));
    }
    let gray = GrayErrors::default();
    instances
        .par_iter()
        .map(|t| instance_errors(model, suite, t, needs, bank, &gray))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: u64,
    pub subtask: Subtask,
    pub gold: usize,
    pub predicted: usize,
    pub gold_rank: usize,
    pub correct: bool,
    pub degenerate: bool,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ci95: (f64, f64),
}

impl Accuracy {
    pub fn of(results: &[&InstanceResult]) -> Accuracy {
        let n = results.len();
        let correct = results.iter().filter(|r| r.correct).count();
        Accuracy {
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            ci95: wilson(correct, n, Z95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub mode: Mode,
    pub bank: BankSpec,
    pub suite_seed: u64,
    /// Hash of the scored instances; results are comparable only when equal.
    pub suite_fingerprint: String,
    pub k: usize,
    pub chance: f64,
    pub overall: Accuracy,
    pub subtasks: BTreeMap<Subtask, Accuracy>,
    pub degenerate_instances: usize,
    pub instances: Vec<InstanceResult>,
}

pub fn suite_fingerprint(suite: &TaskSuite, direction: Direction) -> String {
    let mut h = Sha256::new();
    for t in suite.direction(direction) {
        h.update(serde_json::to_vec(t).expect("instance serializes"));
    }
    hex::encode(h.finalize())
}

/// Rank every instance with the first `n` bank entries.
pub fn evaluate(
    errors: &[InstanceErrors],
    mode: Mode,
    n: usize,
    bank_seed: u64,
    suite: &TaskSuite,
) -> Result<SuiteResult> {
    let instances = errors
        .iter()
        .map(|e| {
            let ranking = Ranking::from_scores(e.scores(mode, n)?);
            Ok(InstanceResult {
                id: e.id,
                subtask: e.subtask,
                gold: e.gold,
                predicted: ranking.top(),
                gold_rank: ranking.rank_of(e.gold),
                correct: ranking.top() == e.gold,
                degenerate: ranking.degenerate,
                scores: ranking.scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&InstanceResult> = instances.iter().collect();
    let mut subtasks = BTreeMap::new();
    for s in Subtask::ALL {
        let of: Vec<&InstanceResult> = instances.iter().filter(|r| r.subtask == s).collect();
        if !of.is_empty() {
            subtasks.insert(s, Accuracy::of(&of));
        }
    }
    Ok(SuiteResult {
        mode,
        bank: BankSpec { n, seed: bank_seed },
        suite_seed: suite.meta.seed,
        suite_fingerprint: suite_fingerprint(suite, mode.direction()),
        k: suite.meta.k,
        chance: suite.meta.chance(),
        overall: Accuracy::of(&all),
        degenerate_instances: instances.iter().filter(|r| r.degenerate).count(),
        subtasks,
        instances,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: Mode,
    pub bank_size: usize,
    pub bank_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: Mode::ImageNormalized,
            bank_size: 10,
            bank_seed: 0,
        }
    }
}

/// Result plus the raw errors behind it (for the score dump).
pub struct SuiteRun {
    pub result: SuiteResult,
    pub errors: Vec<InstanceErrors>,
}

pub fn run_suite(model: &dyn ErrorModel, suite: &TaskSuite, config: &EvalConfig) -> Result<SuiteRun> {
    if suite.direction(config.mode.direction()).next().is_none() {
        return Err(Error::invalid(format!(
            "mode {} needs {:?} instances, the suite has none",
            config.mode,
            config.mode.direction()
        )));
    }
    let bank = make_bank(config.bank_size, config.bank_seed, &NoiseSchedule::default())?;
    let errors = collect_errors(model, suite, config.mode.direction(), config.mode.needs(), &bank)?;
    let result = evaluate(&errors, config.mode, config.bank_size, config.bank_seed, suite)?;
    Ok(SuiteRun { result, errors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub bank_size: usize,
    pub accuracy: Accuracy,
}

/// Accuracy per bank size over nested banks: one bank of the largest size,
/// each smaller size scored on its prefix.
pub fn sweep_from_errors(
    errors: &[InstanceErrors],
    mode: Mode,
    sizes: &[usize],
    bank_seed: u64,
    suite: &TaskSuite,
) -> Result<Vec<SweepPoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("sweep sizes must be non-empty and ascending"));
    }
    sizes
        .iter()
        .map(|&n| {
            Ok(SweepPoint {
                bank_size: n,
                accuracy: evaluate(errors, mode, n, bank_seed, suite)?.overall,
            })
        })
        .collect()
}

pub fn sweep_bank_size(
    model: &dyn ErrorModel,
    suite: &TaskSuite,
    config: &EvalConfig,
    sizes: &[usize],
) -> Result<Vec<SweepPoint>> {
    let max = *sizes.last().ok_or_else(|| Error::invalid("no sweep sizes"))?;
    let run = run_suite(
        model,
        suite,
        &EvalConfig {
            bank_size: max,
            ..config.clone()
        },
    )?;
    sweep_from_errors(&run.errors, config.mode, sizes, config.bank_seed, suite)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub subtask: String,
    pub accuracies: Vec<f64>,
    /// Accuracy of each result minus the first.
    pub deltas: Vec<f64>,
    /// Bootstrap 95% interval of each delta (paired over instances).
    pub delta_ci: Vec<(f64, f64)>,
    /// Wilson intervals of the two accuracies do not overlap.
    pub separated: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub chance: f64,
    pub rows: Vec<DeltaRow>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Side-by-side accuracies and deltas against the first result. All
/// results must come from the same suite instances.
pub fn compare(labels: &[String], results: &[&SuiteResult], seed: u64) -> Result<Comparison> {
    let Some(base) = results.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    if labels.len() != results.len() {
        return Err(Error::invalid("one label per result required"));
    }
    for r in results {
        if r.suite_fingerprint != base.suite_fingerprint || r.instances.len() != base.instances.len() {
            return Err(Error::invalid("results come from different task suites"));
        }
    }
    let mut keys: Vec<Option<Subtask>> = vec![None];
    keys.extend(base.subtasks.keys().copied().map(Some));
    let rows = keys
        .into_iter()
        .map(|key| {
            let pick = |r: &SuiteResult| -> Vec<f64> {
                r.instances
                    .iter()
                    .filter(|i| key.is_none_or(|k| i.subtask == k))
                    .map(|i| f64::from(u8::from(i.correct)))
                    .collect()
            };
            let acc = |r: &SuiteResult| match key {
                None => r.overall.clone(),
                Some(k) => r.subtasks[&k].clone(),
            };
            let base_hits = pick(base);
            let base_acc = acc(base);
            let mut row = DeltaRow {
                subtask: key.map_or("overall".to_string(), |k| k.name().to_string()),
                accuracies: Vec::new(),
                deltas: Vec::new(),
                delta_ci: Vec::new(),
                separated: Vec::new(),
            };
            for (i, r) in results.iter().enumerate() {
                let hits = pick(r);
                let a = acc(r);
                let diffs: Vec<f64> = hits.iter().zip(&base_hits).map(|(x, y)| x - y).collect();
                row.accuracies.push(a.accuracy);
                row.deltas.push(a.accuracy - base_acc.accuracy);
                row.delta_ci
                    .push(bootstrap_mean_ci(&diffs, BOOTSTRAP_RESAMPLES, seed ^ i as u64, 0.95));
                row.separated.push(i > 0 && !intervals_overlap(a.ci95, base_acc.ci95));
            }
            row
        })
        .collect();
    Ok(Comparison {
        labels: labels.to_vec(),
        chance: base.chance,
        rows,
    })
}
