//! Retrieval task suites.
//!
//! Each subtask contributes `n_per_subtask` instances in both directions.
//! Gold scenes come from the held-out partition. Image candidates are renders
//! of near-miss scenes (edit distance 1-2), text candidates are the gold
//! caption plus hard negatives. The gold position is shuffled so that the
//! lowest-index tie rule carries no information.
//!
//! On disk a suite is a directory with `suite.json` ([`SuiteMeta`]),
//! `tasks.jsonl` (one [`TaskInstance`] per line) and `images.bin` (the same
//! blob layout as datasets; image items refer to blob slots).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::caption::{caption_of, substitution_negatives, swap_negative, Attribute, Caption, SwapKind};
use super::dataset::{read_blob, read_jsonl, split_of, write_blob, write_jsonl, Split, BLOB_FILE};
use super::edits::near_misses;
use super::render::{render_bytes, ImageTensor, IMAGE_LEN};
use super::scene::{sample_scene_of_kind, SceneKind, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const META_FILE: &str = "suite.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subtask {
    RecognitionColor,
    RecognitionShape,
    RecognitionSize,
    PairBindingColor,
    PairBindingSize,
    Spatial,
    SwapObject,
}

impl Subtask {
    pub const ALL: [Subtask; 7] = [
        Subtask::RecognitionColor,
        Subtask::RecognitionShape,
        Subtask::RecognitionSize,
        Subtask::PairBindingColor,
        Subtask::PairBindingSize,
        Subtask::Spatial,
        Subtask::SwapObject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::RecognitionColor => "recognition-color",
            Subtask::RecognitionShape => "recognition-shape",
            Subtask::RecognitionSize => "recognition-size",
            Subtask::PairBindingColor => "pair-binding-color",
            Subtask::PairBindingSize => "pair-binding-size",
            Subtask::Spatial => "spatial",
            Subtask::SwapObject => "swap-object",
        }
    }

    pub fn scene_kind(self) -> SceneKind {
        match self {
            Subtask::RecognitionColor | Subtask::RecognitionShape | Subtask::RecognitionSize => {
                SceneKind::Single
            }
            Subtask::PairBindingColor | Subtask::PairBindingSize => SceneKind::Pair,
            Subtask::Spatial | Subtask::SwapObject => SceneKind::Related,
        }
    }

    /// Text negatives that define the subtask.
    fn primary_text(self, gold: &Caption) -> Vec<Caption> {
        let swap = |k| swap_negative(gold, k).into_iter().collect::<Vec<_>>();
        match self {
            Subtask::RecognitionColor => substitution_negatives(gold, Attribute::Color),
            Subtask::RecognitionShape => substitution_negatives(gold, Attribute::Shape),
            Subtask::RecognitionSize => substitution_negatives(gold, Attribute::Size),
            Subtask::PairBindingColor => swap(SwapKind::ColorSwap),
            Subtask::PairBindingSize => swap(SwapKind::AttributeRebind),
            Subtask::Spatial => {
                let mut v = swap(SwapKind::RelationFlip);
                v.extend(substitution_negatives(gold, Attribute::Relation));
                v
            }
            Subtask::SwapObject => swap(SwapKind::ShapeSwap),
        }
    }

    /// Whether near-miss `n` perturbs exactly what the subtask is about.
    fn primary_image(self, gold: &SceneSpec, n: &SceneSpec) -> bool {
        let diff = differing(gold, n);
        let only = |a: Field| diff.iter().all(|&f| f == a);
        let permuted = |key: fn(&super::scene::SceneObject) -> u8| {
            let mut a: Vec<u8> = gold.objects.iter().map(key).collect();
            let mut b: Vec<u8> = n.objects.iter().map(key).collect();
            a.sort_unstable();
            b.sort_unstable();
            a == b
        };
        match self {
            Subtask::RecognitionColor => only(Field::Color),
            Subtask::RecognitionShape => only(Field::Shape),
            Subtask::RecognitionSize => only(Field::Size),
            Subtask::PairBindingColor => only(Field::Color) && permuted(|o| o.color as u8),
            Subtask::PairBindingSize => only(Field::Size) && permuted(|o| o.size as u8),
            Subtask::Spatial => only(Field::Pos),
            Subtask::SwapObject => only(Field::Shape) && permuted(|o| o.shape as u8),
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Subtask> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown subtask `{s}`")))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Shape,
    Color,
    Size,
    Pos,
}

fn differing(a: &SceneSpec, b: &SceneSpec) -> Vec<Field> {
    let mut out = Vec::new();
    for (x, y) in a.objects.iter().zip(&b.objects) {
        if x.shape != y.shape {
            out.push(Field::Shape);
        }
        if x.color != y.color {
            out.push(Field::Color);
        }
        if x.size != y.size {
            out.push(Field::Size);
        }
        if x.pos != y.pos {
            out.push(Field::Pos);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Caption query, image candidates.
    ImageRetrieval,
    /// Image query, caption candidates.
    TextRetrieval,
}

/// A caption or a reference to a rendered image in the suite blob.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Item {
    Caption { text: String },
    Image { slot: u64, scene: SceneSpec, render_seed: u64 },
}

impl Item {
    pub fn caption(&self) -> Option<&str> {
        match self {
            Item::Caption { text } => Some(text),
            Item::Image { .. } => None,
        }
    }

    pub fn image_slot(&self) -> Option<u64> {
        match self {
            Item::Image { slot, .. } => Some(*slot),
            Item::Caption { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub subtask: Subtask,
    pub direction: Direction,
    /// Scene the query and the gold candidate describe.
    pub scene: SceneSpec,
    pub query: Item,
    pub candidates: Vec<Item>,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMeta {
    pub seed: u64,
    pub k: usize,
    pub n_per_subtask: usize,
    pub subtasks: Vec<Subtask>,
    pub instances: usize,
}

impl SuiteMeta {
    pub fn chance(&self) -> f64 {
        1.0 / self.k as f64
    }
}

#[derive(Clone, Debug)]
pub struct TaskSuite {
    pub meta: SuiteMeta,
    pub instances: Vec<TaskInstance>,
    pub blob: Vec<u8>,
}

impl TaskSuite {
    pub fn image(&self, slot: u64) -> ImageTensor {
        let start = slot as usize * IMAGE_LEN;
        ImageTensor::from_bytes(&self.blob[start..start + IMAGE_LEN])
    }

    pub fn direction(&self, d: Direction) -> impl Iterator<Item = &TaskInstance> {
        self.instances.iter().filter(move |t| t.direction == d)
    }

    /// Sub-suite containing only instances of one direction.
    pub fn filtered(&self, d: Direction) -> TaskSuite {
        let instances: Vec<_> = self.direction(d).cloned().collect();
        TaskSuite {
            meta: SuiteMeta {
                instances: instances.len(),
                ..self.meta.clone()
            },
            instances,
            blob: self.blob.clone(),
        }
    }
}

struct Built {
    instance: TaskInstance,
    images: Vec<(SceneSpec, u64)>,
}

fn gold_scene(subtask: Subtask, k: usize, root: u64, index: u64) -> SceneSpec {
    for attempt in 0u64.. {
        let mut rng = derive_rng(root, subtask.name(), (index << 20) | attempt);
        let s = sample_scene_of_kind(subtask.scene_kind(), &mut rng);
        if split_of(&s) != Split::Val {
            continue;
        }
        let gold = caption_of(&s);
        let false_primary: BTreeSet<String> = subtask
            .primary_text(&gold)
            .iter()
            .filter(|c| !c.matches(&s))
            .map(Caption::surface)
            .collect();
        // Spatial instances must be answerable from the relation words alone.
        let needed = match subtask {
            Subtask::Spatial => (k - 1).min(3),
            _ => 1,
        };
        let has_text = false_primary.len() >= needed;
        let has_image = near_misses(&s).iter().any(|n| subtask.primary_image(&s, n));
        if has_text && has_image {
            return s;
        }
    }
    unreachable!()
}

/// Primary pool first (shuffled), then the fallback pool (shuffled),
/// deduplicated by `key`, truncated to `want`.
fn pick<T: Clone, K: Ord, R: Rng>(
    mut primary: Vec<T>,
    mut fallback: Vec<T>,
    want: usize,
    key: impl Fn(&T) -> K,
    exclude: K,
    rng: &mut R,
) -> Vec<T> {
    primary.shuffle(rng);
    fallback.shuffle(rng);
    let mut seen = BTreeSet::from([exclude]);
    primary
        .into_iter()
        .chain(fallback)
        .filter(|c| seen.insert(key(c)))
        .take(want)
        .collect()
}

fn text_instance(subtask: Subtask, id: u64, k: usize, root: u64, scene: SceneSpec) -> Built {
    let mut rng = derive_rng(root, "text-candidates", id);
    let gold = caption_of(&scene);
    let false_for = |v: Vec<Caption>| -> Vec<Caption> { v.into_iter().filter(|c| !c.matches(&scene)).collect() };
    let primary = false_for(subtask.primary_text(&gold));
    let mut fallback: Vec<Caption> = [Attribute::Color, Attribute::Shape, Attribute::Size, Attribute::Relation]
        .into_iter()
        .flat_map(|a| substitution_negatives(&gold, a))
        .chain(
            SwapKind::ALL
                .into_iter()
                .filter(|&k| k != SwapKind::ShuffleOrder)
                .filter_map(|k| swap_negative(&gold, k).ok()),
        )
        .collect();
    fallback = false_for(fallback);
    let mut negs = pick(primary, fallback, k - 1, Caption::surface, gold.surface(), &mut rng);
    if negs.len() < k - 1 {
        // Ungrammatical orderings only as a last resort.
        negs.extend(swap_negative(&gold, SwapKind::ShuffleOrder).ok());
    }
    assert_eq!(negs.len(), k - 1, "not enough negatives for {gold} ({subtask})");
    let mut items: Vec<Item> = std::iter::once(gold.surface())
        .chain(negs.iter().map(Caption::surface))
        .map(|text| Item::Caption { text })
        .collect();
    let order = shuffled_order(k, &mut rng);
    items = order.iter().map(|&i| items[i].clone()).collect();
    let gold_idx = order.iter().position(|&i| i == 0).unwrap();
    let render_seed = derive_seed(root, "text-query-render", id);
    Built {
        instance: TaskInstance {
            id,
            subtask,
            direction: Direction::TextRetrieval,
            query: Item::Image {
                slot: 0,
                scene: scene.clone(),
                render_seed,
            },
            scene: scene.clone(),
            candidates: items,
            gold: gold_idx,
        },
        images: vec![(scene, render_seed)],
    }
}

fn image_instance(subtask: Subtask, id: u64, k: usize, root: u64, scene: SceneSpec) -> Built {
    let mut rng = derive_rng(root, "image-candidates", id);
    let (primary, fallback): (Vec<_>, Vec<_>) = near_misses(&scene)
        .into_iter()
        .partition(|n| subtask.primary_image(&scene, n));
    let negs = pick(primary, fallback, k - 1, SceneSpec::clone, scene.clone(), &mut rng);
    assert_eq!(negs.len(), k - 1, "not enough near misses for {scene:?}");
    let scenes: Vec<SceneSpec> = std::iter::once(scene.clone()).chain(negs).collect();
    let order = shuffled_order(k, &mut rng);
    let gold_idx = order.iter().position(|&i| i == 0).unwrap();
    let images: Vec<(SceneSpec, u64)> = order
        .iter()
        .enumerate()
        .map(|(j, &i)| (scenes[i].clone(), derive_seed(root, "image-candidate-render", id * 64 + j as u64)))
        .collect();
    let candidates = images
        .iter()
        .enumerate()
        .map(|(j, (s, seed))| Item::Image {
            slot: j as u64,
            scene: s.clone(),
            render_seed: *seed,
        })
        .collect();
    Built {
        instance: TaskInstance {
            id,
            subtask,
            direction: Direction::ImageRetrieval,
            query: Item::Caption {
                text: caption_of(&scene).surface(),
            },
            scene,
            candidates,
            gold: gold_idx,
        },
        images,
    }
}

fn shuffled_order<R: Rng>(k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    order
}

/// Build a subtask-balanced suite: for every subtask, `n_per_subtask`
/// text-retrieval and `n_per_subtask` image-retrieval instances over the
/// same gold scenes. A pure function of its arguments.
pub fn build_tasks(suite_seed: u64, k: usize, n_per_subtask: usize) -> Result<TaskSuite> {
    if k < 2 {
        return Err(Error::invalid("k_candidates must be at least 2"));
    }
    if n_per_subtask == 0 {
        return Err(Error::invalid("n_per_subtask must be positive"));
    }
    let jobs: Vec<(Subtask, u64)> = Subtask::ALL
        .into_iter()
        .flat_map(|s| (0..n_per_subtask as u64).map(move |i| (s, i)))
        .collect();
    let built: Vec<(Built, Built)> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(subtask, i))| {
            let scene = gold_scene(subtask, k, suite_seed, i);
            let id = 2 * j as u64;
            (
                text_instance(subtask, id, k, suite_seed, scene.clone()),
                image_instance(subtask, id + 1, k, suite_seed, scene),
            )
        })
        .collect();

    let mut instances = Vec::with_capacity(built.len() * 2);
    let mut blob = Vec::new();
    let mut slot = 0u64;
    let mut rebase = |item: &mut Item| {
        if let Item::Image { slot: s, .. } = item {
            *s = slot;
            slot += 1;
        }
    };
    for b in built.into_iter().flat_map(|(t, i)| [t, i]) {
        let mut inst = b.instance;
        rebase(&mut inst.query);
        inst.candidates.iter_mut().for_each(&mut rebase);
        for (s, seed) in &b.images {
            blob.extend_from_slice(&render_bytes(s, *seed));
        }
        validate(&inst)?;
        instances.push(inst);
    }
    Ok(TaskSuite {
        meta: SuiteMeta {
            seed: suite_seed,
            k,
            n_per_subtask,
            subtasks: Subtask::ALL.to_vec(),
            instances: instances.len(),
        },
        instances,
        blob,
    })
}

/// Exactly one candidate matches the query and candidates are distinct.
pub fn validate(t: &TaskInstance) -> Result<()> {
    let fail = |m: &str| Err(Error::invalid(format!("task {}: {m}", t.id)));
    if t.gold >= t.candidates.len() {
        return fail("gold index out of range");
    }
    let distinct: BTreeSet<String> = t
        .candidates
        .iter()
        .map(|c| match c {
            Item::Caption { text } => text.clone(),
            Item::Image { scene, .. } => serde_json::to_string(scene).unwrap(),
        })
        .collect();
    if distinct.len() != t.candidates.len() {
        return fail("duplicate candidates");
    }
    let matching: Vec<usize> = t
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| item_matches(&t.query, c))
        .map(|(i, _)| i)
        .collect();
    if matching != [t.gold] {
        return fail("gold is not the unique matching candidate");
    }
    Ok(())
}

/// Whether a caption item and an image item describe each other.
pub fn item_matches(a: &Item, b: &Item) -> bool {
    let check = |text: &str, scene: &SceneSpec| {
        super::caption::caption_from_text(text, super::caption::CaptionKind::Positive)
            .map(|c| c.matches(scene))
            .unwrap_or(false)
    };
    match (a, b) {
        (Item::Caption { text }, Item::Image { scene, .. })
        | (Item::Image { scene, .. }, Item::Caption { text }) => check(text, scene),
        _ => false,
    }
}

pub fn write_suite(dir: &Path, suite: &TaskSuite) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&suite.meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    write_jsonl(&dir.join(TASKS_FILE), &suite.instances)?;
    let path = dir.join(BLOB_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_blob(std::io::BufWriter::new(file), &suite.blob).map_err(|e| Error::io(&path, e))
}

pub fn read_suite(dir: &Path) -> Result<TaskSuite> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SuiteMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    let instances: Vec<TaskInstance> = read_jsonl(&dir.join(TASKS_FILE))?;
    let blob = read_blob(&dir.join(BLOB_FILE))?;
    let slots = (blob.len() / IMAGE_LEN) as u64;
    for t in &instances {
        let out_of_range = std::iter::once(&t.query)
            .chain(&t.candidates)
            .filter_map(Item::image_slot)
            .any(|s| s >= slots);
        if out_of_range {
            return Err(Error::Format {
                path: dir.join(TASKS_FILE),
                detail: format!("task {} points past the image blob", t.id),
            });
        }
    }
    Ok(TaskSuite { meta, instances, blob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::caption::tokenize;

    #[test]
    fn suite_is_balanced_and_valid() {
        let suite = build_tasks(3, 4, 12).unwrap();
        assert_eq!(suite.instances.len(), 7 * 12 * 2);
        for s in Subtask::ALL {
            for d in [Direction::TextRetrieval, Direction::ImageRetrieval] {
                let n = suite
                    .instances
                    .iter()
                    .filter(|t| t.subtask == s && t.direction == d)
                    .count();
                assert_eq!(n, 12);
            }
        }
        for t in &suite.instances {
            validate(t).unwrap();
            assert_eq!(t.candidates.len(), 4);
            assert_eq!(split_of(&t.scene), Split::Val);
        }
    }

    #[test]
    fn spatial_captions_differ_only_in_relation_words() {
        let suite = build_tasks(5, 4, 20).unwrap();
        let relation_words = ["left", "right", "of", "above", "below"];
        for t in suite
            .direction(Direction::TextRetrieval)
            .filter(|t| t.subtask == Subtask::Spatial)
        {
            let strip = |s: &str| -> Vec<String> {
                tokenize(s)
                    .unwrap()
                    .iter()
                    .map(|t| t.word().to_string())
                    .filter(|w| !relation_words.contains(&w.as_str()))
                    .collect()
            };
            let gold = strip(t.candidates[t.gold].caption().unwrap());
            for c in &t.candidates {
                assert_eq!(strip(c.caption().unwrap()), gold);
            }
        }
    }

    #[test]
    fn image_candidates_are_near_misses() {
        let suite = build_tasks(8, 4, 10).unwrap();
        for t in suite.direction(Direction::ImageRetrieval) {
            for (i, c) in t.candidates.iter().enumerate() {
                let Item::Image { scene, slot, render_seed } = c else {
                    panic!("image candidate expected")
                };
                assert_eq!(suite.image(*slot), crate::scenegen::render::render(scene, *render_seed));
                let d = t.scene.edit_distance(scene).unwrap();
                if i == t.gold {
                    assert_eq!(d, 0);
                } else {
                    assert!((1..=2).contains(&d));
                }
            }
        }
    }

    #[test]
    fn gold_positions_are_spread() {
        let suite = build_tasks(1, 4, 30).unwrap();
        let mut counts = [0usize; 4];
        for t in &suite.instances {
            counts[t.gold] += 1;
        }
        assert!(counts.iter().all(|&c| c > 20), "{counts:?}");
    }

    #[test]
    fn rejects_small_k() {
        assert!(build_tasks(1, 1, 5).is_err());
    }
}
