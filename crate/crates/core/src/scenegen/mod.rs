//! Procedural scenes, their captions and renders, and the corpora built from
//! them.

pub mod caption;
pub mod dataset;
pub mod edits;
pub mod render;
pub mod scene;
pub mod tasks;

pub use caption::{
    caption_from_text, caption_of, parse, tokenize, substitution_negatives, swap_negative, Attribute,
    Caption, CaptionKind, CaptionStructure, NegativeKind, SwapKind, Token, MAX_CAPTION_TOKENS,
};
pub use dataset::{build_dataset, read_dataset, write_dataset, Dataset, DatasetRecord, Split};
pub use edits::{image_hard_negative, near_misses, neighbours, single_edits};
pub use render::{render, ImageTensor, CHANNELS, GRAY_VALUE, IMAGE_LEN, IMAGE_SIZE};
pub use scene::{sample_scene, Color, Position, Relation, SceneKind, SceneObject, SceneSpec, Shape, Size};
pub use tasks::{build_tasks, read_suite, write_suite, Direction, Item, Subtask, SuiteMeta, TaskInstance, TaskSuite};
