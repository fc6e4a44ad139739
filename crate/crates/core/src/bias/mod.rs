//! Association-bias effect sizes between two image groups and two caption
//! sets, with permutation significance.
//!
//! For an image `i`, `psi(i) = mean_a sigma(i, a) - mean_b sigma(i, b)`.
//! The effect size is
//!
//! ```text
//! d = (mean psi over X - mean psi over Y) / sd(psi over X ∪ Y)
//! ```
//!
//! with the sample standard deviation (`n - 1` denominator). Higher `sigma`
//! means a better image-caption match; for the diffusion scorer it is the
//! negated normalized error.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, NoiseSchedule};
use crate::error::{Error, Result};
use crate::itm::{make_bank, mean_error, ErrorModel, NoiseBank};
use crate::rng::derive_rng;
use crate::scenegen::dataset::read_blob;
use crate::scenegen::{caption_of, render, Color, ImageTensor, SceneKind, SceneSpec, IMAGE_LEN};

/// A similarity `sigma(image, caption)`; larger means a better match.
pub trait PairScorer<I: ?Sized>: Sync {
    fn sigma(&self, image: &I, caption: &str) -> Result<f64>;
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn psi<I: ?Sized>(image: &I, a: &[String], b: &[String], scorer: &dyn PairScorer<I>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("attribute sets must be non-empty"));
    }
    let sa = a.iter().map(|c| scorer.sigma(image, c)).collect::<Result<Vec<_>>>()?;
    let sb = b.iter().map(|c| scorer.sigma(image, c)).collect::<Result<Vec<_>>>()?;
    Ok(mean(&sa) - mean(&sb))
}

/// Mean psi over X minus mean psi over Y.
pub fn statistic(psi_x: &[f64], psi_y: &[f64]) -> f64 {
    mean(psi_x) - mean(psi_y)
}

pub fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn effect_size(psi_x: &[f64], psi_y: &[f64]) -> Result<f64> {
    if psi_x.is_empty() || psi_y.is_empty() {
        return Err(Error::invalid("both target groups need at least one image"));
    }
    // Sorted so the spread depends only on the pooled multiset, which makes
    // swapping X and Y negate d exactly.
    let mut pooled: Vec<f64> = psi_x.iter().chain(psi_y).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let sd = sample_std(&pooled);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate(format!("pooled psi standard deviation is {sd}")));
    }
    Ok(statistic(psi_x, psi_y) / sd)
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn choose(n: usize, k: usize) -> u64 {
    let k = k.min(n - k.min(n));
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    c as u64
}

pub const MAX_EXACT_PERMUTATIONS: u64 = 2_000_000;
pub const DEFAULT_MC_PERMUTATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub n_permutations: u64,
    pub exact: bool,
}

/// One-sided permutation p-value: the fraction of equal-size relabelings
/// of `X ∪ Y` whose statistic is at least the observed one.
///
/// The statistic is monotone in the sum of the relabeled X group, so
/// relabelings are compared by that sum, with a tolerance of `1e-10` times
/// the total absolute psi so that ties survive rounding. Enumerates every
/// relabeling when there are at most `max_exact`; otherwise draws
/// `n_mc` seeded shuffles and counts the identity as one more relabeling.
pub fn permutation_test(psi_x: &[f64], psi_y: &[f64], max_exact: u64, n_mc: usize, seed: u64) -> Result<PermutationResult> {
    if psi_x.is_empty() || psi_y.is_empty() {
        return Err(Error::invalid("both target groups need at least one image"));
    }
    let pooled: Vec<f64> = psi_x.iter().chain(psi_y).copied().collect();
    let k = psi_x.len();
    let observed: f64 = psi_x.iter().sum();
    let tol = 1e-10 * pooled.iter().map(|v| v.abs()).sum::<f64>();
    let threshold = observed - tol;
    let total = choose(pooled.len(), k);
    if total <= max_exact {
        let mut hits = 0u64;
        count_subsets(&pooled, k, 0, 0.0, threshold, &mut hits);
        return Ok(PermutationResult {
            p_value: hits as f64 / total as f64,
            n_permutations: total,
            exact: true,
        });
    }
    if n_mc == 0 {
        return Err(Error::invalid("Monte-Carlo permutation count must be positive"));
    }
    let mut rng = derive_rng(seed, "permutation", 0);
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    let mut hits = 1u64;
    for _ in 0..n_mc {
        idx.shuffle(&mut rng);
        let s: f64 = idx[..k].iter().map(|&i| pooled[i]).sum();
        if s >= threshold {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        p_value: hits as f64 / (n_mc as f64 + 1.0),
        n_permutations: n_mc as u64 + 1,
        exact: false,
    })
}

fn count_subsets(v: &[f64], k: usize, start: usize, sum: f64, threshold: f64, hits: &mut u64) {
    if k == 0 {
        if sum >= threshold {
            *hits += 1;
        }
        return;
    }
    for i in start..=v.len() - k {
        count_subsets(v, k - 1, i + 1, sum + v[i], threshold, hits);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeResult {
    pub d: f64,
    pub p_value: f64,
    pub n_permutations: u64,
    pub exact: bool,
    pub psi_x: Vec<f64>,
    pub psi_y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub max_exact: u64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            max_exact: MAX_EXACT_PERMUTATIONS,
            n_mc: DEFAULT_MC_PERMUTATIONS,
            seed: 0,
        }
    }
}

pub fn effect_size_result(psi_x: Vec<f64>, psi_y: Vec<f64>, test: &TestConfig) -> Result<EffectSizeResult> {
    let d = effect_size(&psi_x, &psi_y)?;
    let p = permutation_test(&psi_x, &psi_y, test.max_exact, test.n_mc, test.seed)?;
    Ok(EffectSizeResult {
        d,
        p_value: p.p_value,
        n_permutations: p.n_permutations,
        exact: p.exact,
        psi_x,
        psi_y,
    })
}

/// Two target groups and two attribute caption sets.
pub struct BiasSpec<'a, I> {
    pub x: &'a [I],
    pub y: &'a [I],
    pub a: &'a [String],
    pub b: &'a [String],
}

pub fn evaluate_spec<I: Sync>(spec: &BiasSpec<'_, I>, scorer: &dyn PairScorer<I>, test: &TestConfig) -> Result<EffectSizeResult> {
    if spec.x.is_empty() || spec.y.is_empty() || spec.a.is_empty() || spec.b.is_empty() {
        return Err(Error::invalid("bias spec needs non-empty X, Y, A and B"));
    }
    let psis = |g: &[I]| -> Result<Vec<f64>> { g.par_iter().map(|i| psi(i, spec.a, spec.b, scorer)).collect() };
    effect_size_result(psis(spec.x)?, psis(spec.y)?, test)
}

/// `sigma = -(err(x, w) - err(x, null))` under one shared bank; the
/// unconditional term is cached per image.
pub struct DiffusionSigma<'a> {
    pub model: &'a dyn ErrorModel,
    pub bank: NoiseBank,
    uncond: Mutex<HashMap<Vec<u8>, f64>>,
}

impl<'a> DiffusionSigma<'a> {
    pub fn new(model: &'a dyn ErrorModel, bank: NoiseBank) -> Self {
        DiffusionSigma {
            model,
            bank,
            uncond: Mutex::new(HashMap::new()),
        }
    }

    fn unconditional(&self, image: &ImageTensor) -> Result<f64> {
        let key = image.to_bytes();
        if let Some(v) = self.uncond.lock().expect("uncond cache").get(&key) {
            return Ok(*v);
        }
        let v = mean_error(&self.model.entry_errors(image, &Conditioning::Null, &self.bank)?)?;
        self.uncond.lock().expect("uncond cache").insert(key, v);
        Ok(v)
    }
}

impl PairScorer<ImageTensor> for DiffusionSigma<'_> {
    fn sigma(&self, image: &ImageTensor, caption: &str) -> Result<f64> {
        let cond = mean_error(&self.model.entry_errors(image, &Conditioning::text(caption)?, &self.bank)?)?;
        Ok(-(cond - self.unconditional(image)?))
    }
}

/// Where a group image comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Scene { scene: SceneSpec, render_seed: u64 },
    Blob { blob: PathBuf, index: u64 },
}

impl ImageSource {
    pub fn load(&self, base: &Path) -> Result<ImageTensor> {
        match self {
            ImageSource::Scene { scene, render_seed } => Ok(render(scene, *render_seed)),
            ImageSource::Blob { blob, index } => {
                let path = base.join(blob);
                let bytes = read_blob(&path)?;
                let start = *index as usize * IMAGE_LEN;
                if start + IMAGE_LEN > bytes.len() {
                    return Err(Error::Format {
                        path,
                        detail: format!("image {index} out of range"),
                    });
                }
                Ok(ImageTensor::from_bytes(&bytes[start..start + IMAGE_LEN]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSets {
    pub a_name: String,
    pub a: Vec<String>,
    pub b_name: String,
    pub b: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSuiteConfig {
    pub groups: BTreeMap<String, Vec<ImageSource>>,
    pub attributes: AttributeSets,
    /// Target-group pairs `(X, Y)`; all unordered pairs when empty.
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    #[serde(default = "default_bias_bank")]
    pub bank_size: usize,
    #[serde(default)]
    pub bank_seed: u64,
    #[serde(default)]
    pub test: TestConfig,
}

pub const DEFAULT_BIAS_BANK: usize = 20;

fn default_bias_bank() -> usize {
    DEFAULT_BIAS_BANK
}

impl BiasSuiteConfig {
    pub fn resolved_pairs(&self) -> Result<Vec<(String, String)>> {
        let pairs = if self.pairs.is_empty() {
            let names: Vec<&String> = self.groups.keys().collect();
            let mut out = Vec::new();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    out.push((names[i].clone(), names[j].clone()));
                }
            }
            out
        } else {
            self.pairs.clone()
        };
        for (x, y) in &pairs {
            for g in [x, y] {
                if !self.groups.contains_key(g) {
                    return Err(Error::invalid(format!("unknown bias group `{g}`")));
                }
            }
            if x == y {
                return Err(Error::invalid(format!("group `{x}` paired with itself")));
            }
        }
        if pairs.is_empty() {
            return Err(Error::invalid("bias suite needs at least two groups"));
        }
        Ok(pairs)
    }
}

pub fn read_config(path: &Path) -> Result<BiasSuiteConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub x: String,
    pub y: String,
    /// `None` when the pooled psi values have zero spread.
    pub result: Option<EffectSizeResult>,
    pub degenerate: bool,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub a_name: String,
    pub b_name: String,
    pub rows: Vec<BiasRow>,
    /// Mean `|d|` over non-degenerate rows.
    pub average_abs_effect: Option<f64>,
}

pub const SIGNIFICANCE: f64 = 0.01;

/// One row per target-group pair, with images loaded relative to `base`.
pub fn bias_suite(config: &BiasSuiteConfig, base: &Path, scorer: &dyn PairScorer<ImageTensor>) -> Result<BiasTable> {
    let pairs = config.resolved_pairs()?;
    let mut images: BTreeMap<&str, Vec<ImageTensor>> = BTreeMap::new();
    for (name, sources) in &config.groups {
        if sources.is_empty() {
            return Err(Error::invalid(format!("bias group `{name}` is empty")));
        }
        images.insert(name, sources.iter().map(|s| s.load(base)).collect::<Result<_>>()?);
    }
    let rows = pairs
        .into_iter()
        .map(|(x, y)| {
            let spec = BiasSpec {
                x: &images[x.as_str()],
                y: &images[y.as_str()],
                a: &config.attributes.a,
                b: &config.attributes.b,
            };
            match evaluate_spec(&spec, scorer, &config.test) {
                Ok(r) => Ok(BiasRow {
                    significant: r.p_value < SIGNIFICANCE,
                    x,
                    y,
                    result: Some(r),
                    degenerate: false,
                }),
                Err(Error::Degenerate(_)) => Ok(BiasRow {
                    x,
                    y,
                    result: None,
                    degenerate: true,
                    significant: false,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ds: Vec<f64> = rows.iter().filter_map(|r| r.result.as_ref().map(|r| r.d.abs())).collect();
    Ok(BiasTable {
        a_name: config.attributes.a_name.clone(),
        b_name: config.attributes.b_name.clone(),
        average_abs_effect: (!ds.is_empty()).then(|| mean(&ds)),
        rows,
    })
}

pub fn diffusion_bias_suite(config: &BiasSuiteConfig, base: &Path, model: &dyn ErrorModel) -> Result<BiasTable> {
    let bank = make_bank(config.bank_size, config.bank_seed, &NoiseSchedule::default())?;
    bias_suite(config, base, &DiffusionSigma::new(model, bank))
}

fn colored_singles(color: Color, n: usize, seed: u64, label: &str) -> Vec<SceneSpec> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let mut rng = derive_rng(seed, label, i);
        let mut s = crate::scenegen::scene::sample_scene_of_kind(SceneKind::Single, &mut rng);
        s.objects[0].color = color;
        if !out.contains(&s) {
            out.push(s);
        }
        i += 1;
    }
    out
}

/// Synthetic control: single red objects against single blue objects,
/// with red captions as A and blue captions as B, plus a green group that
/// matches neither.
pub fn control_suite(seed: u64, per_group: usize) -> BiasSuiteConfig {
    let group = |color: Color, label: &str| -> Vec<ImageSource> {
        colored_singles(color, per_group, seed, label)
            .into_iter()
            .enumerate()
            .map(|(i, scene)| ImageSource::Scene {
                scene,
                render_seed: crate::rng::derive_seed(seed, "bias-render", i as u64 + (color as u64) * 1000),
            })
            .collect()
    };
    let captions = |color: Color, label: &str| -> Vec<String> {
        colored_singles(color, 4, seed, label)
            .iter()
            .map(|s| caption_of(s).surface())
            .collect()
    };
    let mut groups = BTreeMap::new();
    groups.insert("red".to_string(), group(Color::Red, "bias-red"));
    groups.insert("blue".to_string(), group(Color::Blue, "bias-blue"));
    groups.insert("green".to_string(), group(Color::Green, "bias-green"));
    BiasSuiteConfig {
        groups,
        attributes: AttributeSets {
            a_name: "red captions".into(),
            a: captions(Color::Red, "bias-caption-red"),
            b_name: "blue captions".into(),
            b: captions(Color::Blue, "bias-caption-blue"),
        },
        pairs: vec![
            ("red".into(), "blue".into()),
            ("red".into(), "green".into()),
            ("green".into(), "blue".into()),
        ],
        bank_size: DEFAULT_BIAS_BANK,
        bank_seed: seed,
        test: TestConfig {
            seed,
            ..TestConfig::default()
        },
    }
}

fn stars(row: &BiasRow) -> &'static str {
    if row.significant {
        "*"
    } else {
        ""
    }
}

pub fn table_markdown(t: &BiasTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "A = {}, B = {}\n", t.a_name, t.b_name);
    let _ = writeln!(s, "| X | Y | d | p |");
    let _ = writeln!(s, "|---|---|---:|---:|");
    for r in &t.rows {
        match &r.result {
            Some(e) => {
                let _ = writeln!(s, "| {} | {} | {:.3}{} | {:.4} |", r.x, r.y, e.d, stars(r), e.p_value);
            }
            None => {
                let _ = writeln!(s, "| {} | {} | degenerate | n/a |", r.x, r.y);
            }
        }
    }
    match t.average_abs_effect {
        Some(v) => {
            let _ = writeln!(s, "| average absolute effect size | | {v:.3} | |");
        }
        None => {
            let _ = writeln!(s, "| average absolute effect size | | n/a | |");
        }
    }
    let _ = writeln!(s, "\n`*`: p < {SIGNIFICANCE}.");
    s
}

pub fn table_csv(t: &BiasTable) -> String {
    let mut s = String::from("x,y,d,p_value,n_permutations,exact,significant,degenerate\n");
    for r in &t.rows {
        match &r.result {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},false",
                    r.x, r.y, e.d, e.p_value, e.n_permutations, e.exact, r.significant
                );
            }
            None => {
                let _ = writeln!(s, "{},{},,,,,false,true", r.x, r.y);
            }
        }
    }
    s
}
