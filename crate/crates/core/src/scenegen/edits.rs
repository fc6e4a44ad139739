//! Scene-graph edits: distance-1 neighbours, image hard negatives and
//! near-miss candidate pools.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;

use super::caption::caption_of;
use super::scene::{Color, Position, Relation, SceneKind, SceneSpec, Shape, Size};
use crate::rng::rng_from_seed;

/// Re-derive the relation after a move; `None` if a related scene lost its
/// alignment (such a scene would change family).
fn relink(mut s: SceneSpec, kind: SceneKind) -> Option<SceneSpec> {
    if kind == SceneKind::Related {
        s.relation = Some(Relation::between(s.objects[0].pos, s.objects[1].pos)?);
    }
    s.is_valid().then_some(s)
}

/// Every legal scene of the same family at edit distance exactly 1.
pub fn single_edits(spec: &SceneSpec) -> Vec<SceneSpec> {
    let kind = spec.kind();
    let mut out = Vec::new();
    for i in 0..spec.objects.len() {
        let o = spec.objects[i];
        let mut push = |f: &dyn Fn(&mut SceneSpec)| {
            let mut s = spec.clone();
            f(&mut s);
            if let Some(s) = relink(s, kind) {
                out.push(s);
            }
        };
        for v in Shape::ALL.into_iter().filter(|&v| v != o.shape) {
            push(&|s| s.objects[i].shape = v);
        }
        for v in Color::ALL.into_iter().filter(|&v| v != o.color) {
            push(&|s| s.objects[i].color = v);
        }
        for v in Size::ALL.into_iter().filter(|&v| v != o.size) {
            push(&|s| s.objects[i].size = v);
        }
        for p in Position::all().filter(|&p| spec.objects.iter().all(|x| x.pos != p)) {
            push(&|s| s.objects[i].pos = p);
        }
    }
    out
}

/// Legal scenes at distance 1 or 2 from `spec`, sorted and deduplicated.
pub fn neighbours(spec: &SceneSpec) -> Vec<SceneSpec> {
    let mut set = BTreeSet::new();
    for one in single_edits(spec) {
        for two in single_edits(&one) {
            if matches!(spec.edit_distance(&two), Some(1 | 2)) {
                set.insert(two);
            }
        }
        set.insert(one);
    }
    set.remove(spec);
    set.into_iter().collect()
}

/// Neighbours at distance 1-2 that the positive caption of `spec` does not
/// describe.
pub fn near_misses(spec: &SceneSpec) -> Vec<SceneSpec> {
    let caption = caption_of(spec);
    neighbours(spec)
        .into_iter()
        .filter(|n| !caption.matches(n))
        .collect()
}

/// One-attribute edit of `spec` that its own caption no longer describes,
/// chosen uniformly by `seed`.
pub fn image_hard_negative(spec: &SceneSpec, seed: u64) -> SceneSpec {
    let caption = caption_of(spec);
    let pool: Vec<SceneSpec> = single_edits(spec)
        .into_iter()
        .filter(|n| !caption.matches(n))
        .collect();
    let mut rng = rng_from_seed(seed);
    pool.choose(&mut rng)
        .expect("every scene has a caption-visible single edit")
        .clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::scene::{sample_scene, SceneObject};

    #[test]
    fn hard_negative_is_one_visible_edit_away() {
        for seed in 0..2000 {
            let s = sample_scene(seed);
            let n = image_hard_negative(&s, seed ^ 0xabc);
            assert_eq!(s.edit_distance(&n), Some(1), "{s:?} -> {n:?}");
            assert!(n.is_valid());
            assert!(!caption_of(&s).matches(&n));
        }
    }

    #[test]
    fn red_square_color_edit() {
        let s = SceneSpec {
            objects: vec![SceneObject {
                shape: Shape::Square,
                color: Color::Red,
                size: Size::Small,
                pos: Position { row: 0, col: 0 },
            }],
            relation: None,
        };
        let recolors: Vec<_> = single_edits(&s)
            .into_iter()
            .filter(|n| n.objects[0].color == Color::Blue)
            .collect();
        assert_eq!(recolors.len(), 1);
        assert_eq!(recolors[0].objects[0].shape, Shape::Square);
    }

    #[test]
    fn near_misses_are_close_and_false() {
        for seed in 0..100 {
            let s = sample_scene(seed);
            let pool = near_misses(&s);
            assert!(pool.len() >= 3);
            for n in &pool {
                assert!(matches!(s.edit_distance(n), Some(1 | 2)));
                assert!(n.is_valid());
                assert_eq!(n.kind(), s.kind());
            }
        }
    }
}
