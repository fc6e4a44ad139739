//! Training corpus and its on-disk container.
//!
//! A dataset directory holds
//!
//! * `manifest.jsonl`: one [`DatasetRecord`] per line;
//! * `images.bin`: the pixel blob (see [`write_blob`]).
//!
//! Each record owns two blob slots: its own render and the render of its
//! image hard negative.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::caption::{caption_of, substitution_negatives, swap_negative, Attribute, Caption, NegativeKind, SwapKind};
use super::edits::image_hard_negative;
use super::render::{render_bytes, ImageTensor, CHANNELS, IMAGE_LEN, IMAGE_SIZE};
use super::scene::{sample_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed};

pub const BLOB_MAGIC: &[u8; 8] = b"DITMIMGS";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_FILE: &str = "images.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

/// Scenes whose fingerprint falls in this residue class are held out from
/// training, making train and held-out scene sets disjoint by construction.
const HELD_OUT_MODULUS: u64 = 8;

pub fn split_of(scene: &SceneSpec) -> Split {
    if scene.fingerprint() % HELD_OUT_MODULUS == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

/// First scene drawn from the `(root, label, index)` stream that lands in
/// `split`.
pub fn sample_scene_in(split: Split, root: u64, label: &str, index: u64) -> (SceneSpec, u64) {
    for attempt in 0.. {
        let seed = derive_seed(root, label, (index << 16) | attempt);
        let scene = sample_scene(seed);
        if split_of(&scene) == split {
            return (scene, seed);
        }
    }
    unreachable!()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub split: Split,
    pub scene: SceneSpec,
    pub render_seed: u64,
    pub caption: String,
    /// Negative kind (as displayed by [`NegativeKind`]) to caption text.
    pub text_negatives: BTreeMap<String, String>,
    pub image_negative: SceneSpec,
    pub image_negative_seed: u64,
    /// Blob slot of the record's own image.
    pub image_index: u64,
    /// Blob slot of the image hard negative.
    pub negative_image_index: u64,
}

/// Every applicable swap negative plus one seeded substitution per
/// caption-visible attribute.
pub fn text_negatives(positive: &Caption, seed: u64) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for kind in SwapKind::ALL {
        if let Ok(neg) = swap_negative(positive, kind) {
            out.insert(NegativeKind::Swap(kind).to_string(), neg.surface());
        }
    }
    for (i, attr) in [Attribute::Color, Attribute::Shape, Attribute::Size, Attribute::Relation]
        .into_iter()
        .enumerate()
    {
        let pool = substitution_negatives(positive, attr);
        let mut rng = derive_rng(seed, "substitution", i as u64);
        if let Some(neg) = pool.choose(&mut rng) {
            out.insert(NegativeKind::Substitute(attr).to_string(), neg.surface());
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Concatenated 8-bit images, `IMAGE_LEN` bytes per slot.
    pub blob: Vec<u8>,
}

impl Dataset {
    pub fn image(&self, index: u64) -> ImageTensor {
        let start = index as usize * IMAGE_LEN;
        ImageTensor::from_bytes(&self.blob[start..start + IMAGE_LEN])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn make_record(id: u64, split: Split, root: u64) -> (DatasetRecord, Vec<u8>, Vec<u8>) {
    let label = match split {
        Split::Train => "scene-train",
        Split::Val => "scene-val",
    };
    let (scene, _) = sample_scene_in(split, root, label, id);
    let render_seed = derive_seed(root, "render", id);
    let positive = caption_of(&scene);
    let neg_seed = derive_seed(root, "image-negative", id);
    let image_negative = image_hard_negative(&scene, neg_seed);
    let image_negative_seed = derive_seed(root, "render-negative", id);
    let record = DatasetRecord {
        id,
        split,
        caption: positive.surface(),
        text_negatives: text_negatives(&positive, derive_seed(root, "text-negative", id)),
        image_index: 2 * id,
        negative_image_index: 2 * id + 1,
        render_seed,
        image_negative_seed,
        image_negative: image_negative.clone(),
        scene: scene.clone(),
    };
    let img = render_bytes(&scene, render_seed);
    let neg = render_bytes(&image_negative, image_negative_seed);
    (record, img, neg)
}

/// Generate `n_train + n_val` records; a pure function of `seed`.
/// Record ids run from 0, train records first.
pub fn build_dataset(n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::invalid("n_train and n_val must both be positive"));
    }
    let specs: Vec<(u64, Split)> = (0..n_train as u64)
        .map(|i| (i, Split::Train))
        .chain((n_train as u64..(n_train + n_val) as u64).map(|i| (i, Split::Val)))
        .collect();
    let built: Vec<_> = specs
        .par_iter()
        .map(|&(id, split)| make_record(id, split, seed))
        .collect();
    let mut ds = Dataset {
        records: Vec::with_capacity(built.len()),
        blob: Vec::with_capacity(built.len() * 2 * IMAGE_LEN),
    };
    for (rec, img, neg) in built {
        ds.blob.extend_from_slice(&img);
        ds.blob.extend_from_slice(&neg);
        ds.records.push(rec);
    }
    Ok(ds)
}

/// Blob layout, all integers little-endian:
///
/// ```text
/// magic "DITMIMGS" | version u32 | height u32 | width u32 | channels u32 |
/// count u64 | count x (height*width*channels bytes, row-major RGB)
/// ```
pub fn write_blob<W: Write>(mut w: W, blob: &[u8]) -> std::io::Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    for d in [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&((blob.len() / IMAGE_LEN) as u64).to_le_bytes())?;
    w.write_all(blob)?;
    w.flush()
}

pub fn read_blob(path: &Path) -> Result<Vec<u8>> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut header = [0u8; 8 + 4 * 4 + 8];
    r.read_exact(&mut header).map_err(io)?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if &header[..8] != BLOB_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if u32_at(8) != BLOB_VERSION {
        return Err(bad("unsupported version"));
    }
    if (u32_at(12), u32_at(16), u32_at(20)) != (IMAGE_SIZE as u32, IMAGE_SIZE as u32, CHANNELS as u32) {
        return Err(bad("unexpected image geometry"));
    }
    let count = u64::from_le_bytes(header[24..32].try_into().unwrap()) as usize;
    let mut blob = Vec::with_capacity(count * IMAGE_LEN);
    r.read_to_end(&mut blob).map_err(io)?;
    if blob.len() != count * IMAGE_LEN {
        return Err(bad("blob length does not match header count"));
    }
    Ok(blob)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(MANIFEST_FILE), &ds.records)?;
    let path = dir.join(BLOB_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_blob(BufWriter::new(file), &ds.blob).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let records: Vec<DatasetRecord> = read_jsonl(&dir.join(MANIFEST_FILE))?;
    let blob = read_blob(&dir.join(BLOB_FILE))?;
    let slots = (blob.len() / IMAGE_LEN) as u64;
    if let Some(r) = records
        .iter()
        .find(|r| r.image_index >= slots || r.negative_image_index >= slots)
    {
        return Err(Error::Format {
            path: dir.join(MANIFEST_FILE),
            detail: format!("record {} points past the image blob", r.id),
        });
    }
    Ok(Dataset { records, blob })
}
