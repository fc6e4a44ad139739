//! Closed-vocabulary caption grammar.
//!
//! ```text
//! single   := "a" SIZE COLOR SHAPE
//! pair     := single "and" single
//! related  := "a" COLOR SHAPE REL "a" COLOR SHAPE
//! REL      := "left of" | "right of" | "above" | "below"
//! ```
//!
//! Rendering a [`CaptionStructure`] and parsing the result are inverse
//! functions, so a grammatical caption's structure is recoverable from its
//! surface tokens alone.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scene::{Color, Relation, SceneKind, SceneSpec, Shape, Size};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Token {
    A,
    Small,
    Large,
    Red,
    Green,
    Blue,
    Yellow,
    Square,
    Circle,
    Triangle,
    And,
    Left,
    Right,
    Of,
    Above,
    Below,
}

impl Token {
    pub const ALL: [Token; 16] = [
        Token::A,
        Token::Small,
        Token::Large,
        Token::Red,
        Token::Green,
        Token::Blue,
        Token::Yellow,
        Token::Square,
        Token::Circle,
        Token::Triangle,
        Token::And,
        Token::Left,
        Token::Right,
        Token::Of,
        Token::Above,
        Token::Below,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Token::A => "a",
            Token::Small => "small",
            Token::Large => "large",
            Token::Red => "red",
            Token::Green => "green",
            Token::Blue => "blue",
            Token::Yellow => "yellow",
            Token::Square => "square",
            Token::Circle => "circle",
            Token::Triangle => "triangle",
            Token::And => "and",
            Token::Left => "left",
            Token::Right => "right",
            Token::Of => "of",
            Token::Above => "above",
            Token::Below => "below",
        }
    }

    pub fn from_word(word: &str) -> Option<Token> {
        Token::ALL.into_iter().find(|t| t.word() == word)
    }

    /// Dense id in `0..Token::ALL.len()`.
    pub fn id(self) -> usize {
        self as usize
    }

    fn of_size(s: Size) -> Token {
        match s {
            Size::Small => Token::Small,
            Size::Large => Token::Large,
        }
    }

    fn of_color(c: Color) -> Token {
        match c {
            Color::Red => Token::Red,
            Color::Green => Token::Green,
            Color::Blue => Token::Blue,
            Color::Yellow => Token::Yellow,
        }
    }

    fn of_shape(s: Shape) -> Token {
        match s {
            Shape::Square => Token::Square,
            Shape::Circle => Token::Circle,
            Shape::Triangle => Token::Triangle,
        }
    }
}

/// Longest grammatical caption ("a large red square and a small blue circle").
pub const MAX_CAPTION_TOKENS: usize = 9;

/// One noun phrase. `size` is absent in relation captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Phrase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Size>,
    pub color: Color,
    pub shape: Shape,
}

/// The scene fragment a caption asserts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "form", content = "phrases", rename_all = "kebab-case")]
pub enum CaptionStructure {
    Single(Phrase),
    Pair(Phrase, Phrase),
    Related(Phrase, Relation, Phrase),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapKind {
    ColorSwap,
    ShapeSwap,
    RelationFlip,
    AttributeRebind,
    ShuffleOrder,
}

impl SwapKind {
    pub const ALL: [SwapKind; 5] = [
        SwapKind::ColorSwap,
        SwapKind::ShapeSwap,
        SwapKind::RelationFlip,
        SwapKind::AttributeRebind,
        SwapKind::ShuffleOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SwapKind::ColorSwap => "color-swap",
            SwapKind::ShapeSwap => "shape-swap",
            SwapKind::RelationFlip => "relation-flip",
            SwapKind::AttributeRebind => "attribute-rebind",
            SwapKind::ShuffleOrder => "shuffle-order",
        }
    }

    pub fn parse(name: &str) -> Option<SwapKind> {
        SwapKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Caption-visible attribute replaced by a substitution negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Color,
    Shape,
    Size,
    Relation,
}

/// How a negative caption was derived from its positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "of", rename_all = "kebab-case")]
pub enum NegativeKind {
    /// Elements of the caption exchanged with each other.
    Swap(SwapKind),
    /// One element replaced by another vocabulary word of the same category.
    Substitute(Attribute),
}

impl fmt::Display for NegativeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeKind::Swap(k) => f.write_str(k.name()),
            NegativeKind::Substitute(a) => write!(f, "substitute-{}", format!("{a:?}").to_lowercase()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "negative", rename_all = "kebab-case")]
pub enum CaptionKind {
    Positive,
    Negative(NegativeKind),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    pub tokens: Vec<Token>,
    /// `None` for ungrammatical captions (shuffled word order).
    pub structure: Option<CaptionStructure>,
    pub kind: CaptionKind,
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&surface(&self.tokens))
    }
}

pub fn surface(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.word()).collect::<Vec<_>>().join(" ")
}

fn phrase_tokens(p: &Phrase, out: &mut Vec<Token>) {
    out.push(Token::A);
    if let Some(s) = p.size {
        out.push(Token::of_size(s));
    }
    out.push(Token::of_color(p.color));
    out.push(Token::of_shape(p.shape));
}

fn relation_tokens(r: Relation) -> &'static [Token] {
    match r {
        Relation::LeftOf => &[Token::Left, Token::Of],
        Relation::RightOf => &[Token::Right, Token::Of],
        Relation::Above => &[Token::Above],
        Relation::Below => &[Token::Below],
    }
}

impl CaptionStructure {
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(MAX_CAPTION_TOKENS);
        match self {
            CaptionStructure::Single(p) => phrase_tokens(p, &mut out),
            CaptionStructure::Pair(a, b) => {
                phrase_tokens(a, &mut out);
                out.push(Token::And);
                phrase_tokens(b, &mut out);
            }
            CaptionStructure::Related(a, r, b) => {
                phrase_tokens(a, &mut out);
                out.extend_from_slice(relation_tokens(*r));
                phrase_tokens(b, &mut out);
            }
        }
        out
    }

    /// Whether the fragment is true of `scene`: object counts agree and some
    /// assignment of phrases to objects matches every stated attribute (and
    /// the relation, geometrically).
    pub fn matches(&self, scene: &SceneSpec) -> bool {
        let objs = &scene.objects;
        let fits = |p: &Phrase, i: usize| {
            let o = &objs[i];
            p.color == o.color && p.shape == o.shape && p.size.is_none_or(|s| s == o.size)
        };
        match (self, objs.len()) {
            (CaptionStructure::Single(p), 1) => fits(p, 0),
            (CaptionStructure::Pair(a, b), 2) => {
                (fits(a, 0) && fits(b, 1)) || (fits(a, 1) && fits(b, 0))
            }
            (CaptionStructure::Related(a, r, b), 2) => [(0, 1), (1, 0)]
                .into_iter()
                .any(|(i, j)| fits(a, i) && fits(b, j) && r.holds(objs[i].pos, objs[j].pos)),
            _ => false,
        }
    }

    /// Semantic equality: the two fragments describe exactly the same scenes.
    pub fn equivalent(&self, other: &CaptionStructure) -> bool {
        match (self, other) {
            (CaptionStructure::Single(a), CaptionStructure::Single(b)) => a == b,
            (CaptionStructure::Pair(a1, b1), CaptionStructure::Pair(a2, b2)) => {
                (a1 == a2 && b1 == b2) || (a1 == b2 && b1 == a2)
            }
            (CaptionStructure::Related(a1, r1, b1), CaptionStructure::Related(a2, r2, b2)) => {
                (a1 == a2 && r1 == r2 && b1 == b2) || (a1 == b2 && *r1 == r2.inverse() && b1 == a2)
            }
            _ => false,
        }
    }

    fn phrases(&self) -> Vec<Phrase> {
        match self {
            CaptionStructure::Single(p) => vec![*p],
            CaptionStructure::Pair(a, b) | CaptionStructure::Related(a, _, b) => vec![*a, *b],
        }
    }

    fn with_phrases(&self, ps: &[Phrase]) -> CaptionStructure {
        match self {
            CaptionStructure::Single(_) => CaptionStructure::Single(ps[0]),
            CaptionStructure::Pair(..) => CaptionStructure::Pair(ps[0], ps[1]),
            CaptionStructure::Related(_, r, _) => CaptionStructure::Related(ps[0], *r, ps[1]),
        }
    }
}

/// Fragment of `spec` that its caption asserts (everything but cells and
/// jitter; sizes are dropped for relation scenes).
pub fn asserted_fragment(spec: &SceneSpec) -> CaptionStructure {
    let phrase = |i: usize, with_size: bool| {
        let o = &spec.objects[i];
        Phrase {
            size: with_size.then_some(o.size),
            color: o.color,
            shape: o.shape,
        }
    };
    match spec.kind() {
        SceneKind::Single => CaptionStructure::Single(phrase(0, true)),
        SceneKind::Pair => CaptionStructure::Pair(phrase(0, true), phrase(1, true)),
        SceneKind::Related => CaptionStructure::Related(
            phrase(0, false),
            spec.relation.expect("related scene"),
            phrase(1, false),
        ),
    }
}

impl Caption {
    pub fn from_structure(structure: CaptionStructure, kind: CaptionKind) -> Caption {
        Caption {
            tokens: structure.tokens(),
            structure: Some(structure),
            kind,
        }
    }

    pub fn surface(&self) -> String {
        surface(&self.tokens)
    }

    pub fn matches(&self, scene: &SceneSpec) -> bool {
        self.structure.as_ref().is_some_and(|s| s.matches(scene))
    }
}

/// The positive caption of a scene.
pub fn caption_of(spec: &SceneSpec) -> Caption {
    Caption::from_structure(asserted_fragment(spec), CaptionKind::Positive)
}

fn parse_phrase(tokens: &[Token], with_size: bool) -> Option<(Phrase, &[Token])> {
    let (first, rest) = tokens.split_first()?;
    if *first != Token::A {
        return None;
    }
    let (size, rest) = if with_size {
        let (t, rest) = rest.split_first()?;
        let s = match t {
            Token::Small => Size::Small,
            Token::Large => Size::Large,
            _ => return None,
        };
        (Some(s), rest)
    } else {
        (None, rest)
    };
    let (c, rest) = rest.split_first()?;
    let color = match c {
        Token::Red => Color::Red,
        Token::Green => Color::Green,
        Token::Blue => Color::Blue,
        Token::Yellow => Color::Yellow,
        _ => return None,
    };
    let (s, rest) = rest.split_first()?;
    let shape = match s {
        Token::Square => Shape::Square,
        Token::Circle => Shape::Circle,
        Token::Triangle => Shape::Triangle,
        _ => return None,
    };
    Some((Phrase { size, color, shape }, rest))
}

fn parse_relation(tokens: &[Token]) -> Option<(Relation, &[Token])> {
    match tokens {
        [Token::Left, Token::Of, rest @ ..] => Some((Relation::LeftOf, rest)),
        [Token::Right, Token::Of, rest @ ..] => Some((Relation::RightOf, rest)),
        [Token::Above, rest @ ..] => Some((Relation::Above, rest)),
        [Token::Below, rest @ ..] => Some((Relation::Below, rest)),
        _ => None,
    }
}

/// Parse a token sequence against the grammar.
pub fn parse_tokens(tokens: &[Token]) -> Option<CaptionStructure> {
    if let Some((a, rest)) = parse_phrase(tokens, true) {
        return match rest {
            [] => Some(CaptionStructure::Single(a)),
            [Token::And, tail @ ..] => match parse_phrase(tail, true)? {
                (b, []) => Some(CaptionStructure::Pair(a, b)),
                _ => None,
            },
            _ => None,
        };
    }
    let (a, rest) = parse_phrase(tokens, false)?;
    let (r, rest) = parse_relation(rest)?;
    match parse_phrase(rest, false)? {
        (b, []) => Some(CaptionStructure::Related(a, r, b)),
        _ => None,
    }
}

pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace()
        .map(|w| Token::from_word(w).ok_or_else(|| Error::Parse(format!("unknown word `{w}` in `{text}`"))))
        .collect()
}

/// Tokenize and parse a grammatical caption.
pub fn parse(text: &str) -> Result<Caption> {
    let tokens = tokenize(text)?;
    let structure = parse_tokens(&tokens).ok_or_else(|| Error::Parse(text.to_string()))?;
    Ok(Caption {
        tokens,
        structure: Some(structure),
        kind: CaptionKind::Positive,
    })
}

/// Caption from free text: grammatical text gets its structure, other
/// in-vocabulary token sequences get none.
pub fn caption_from_text(text: &str, kind: CaptionKind) -> Result<Caption> {
    let tokens = tokenize(text)?;
    let structure = parse_tokens(&tokens);
    Ok(Caption {
        tokens,
        structure,
        kind,
    })
}

fn inapplicable(kind: SwapKind, reason: &str) -> Error {
    Error::Inapplicable {
        subtype: kind.name().to_string(),
        reason: reason.to_string(),
    }
}

/// Hard negative made by exchanging caption elements of the same category.
///
/// Swap subtypes keep the token multiset; all of them fail with
/// [`Error::Inapplicable`] when the result would be semantically equal to the
/// input (e.g. swapping two identical colors).
pub fn swap_negative(c: &Caption, kind: SwapKind) -> Result<Caption> {
    if kind == SwapKind::ShuffleOrder {
        return shuffle_negative(c);
    }
    let s = c
        .structure
        .as_ref()
        .ok_or_else(|| inapplicable(kind, "caption is not grammatical"))?;
    let ps = s.phrases();
    let swapped = match (kind, s) {
        (_, CaptionStructure::Single(_)) => {
            return Err(inapplicable(kind, "needs a two-object caption"))
        }
        (SwapKind::RelationFlip, CaptionStructure::Related(a, r, b)) => {
            CaptionStructure::Related(*a, r.inverse(), *b)
        }
        (SwapKind::RelationFlip, _) => return Err(inapplicable(kind, "caption has no relation")),
        (SwapKind::AttributeRebind, CaptionStructure::Pair(..)) => {
            let (mut a, mut b) = (ps[0], ps[1]);
            std::mem::swap(&mut a.size, &mut b.size);
            s.with_phrases(&[a, b])
        }
        (SwapKind::AttributeRebind, _) => {
            return Err(inapplicable(kind, "relation captions carry no sizes"))
        }
        (SwapKind::ColorSwap, _) => {
            let (mut a, mut b) = (ps[0], ps[1]);
            std::mem::swap(&mut a.color, &mut b.color);
            s.with_phrases(&[a, b])
        }
        (SwapKind::ShapeSwap, _) => {
            let (mut a, mut b) = (ps[0], ps[1]);
            std::mem::swap(&mut a.shape, &mut b.shape);
            s.with_phrases(&[a, b])
        }
        (SwapKind::ShuffleOrder, _) => unreachable!(),
    };
    if swapped.equivalent(s) {
        return Err(inapplicable(kind, "swap leaves the meaning unchanged"));
    }
    Ok(Caption::from_structure(swapped, CaptionKind::Negative(NegativeKind::Swap(kind))))
}

/// Deterministic token permutation seeded by the caption surface. Retries
/// until the order differs and the result does not parse to an equivalent
/// fragment.
fn shuffle_negative(c: &Caption) -> Result<Caption> {
    let kind = SwapKind::ShuffleOrder;
    let key = surface(&c.tokens);
    for attempt in 0..64 {
        let mut rng = derive_rng(0, &key, attempt);
        let mut tokens = c.tokens.clone();
        tokens.shuffle(&mut rng);
        if tokens == c.tokens {
            continue;
        }
        let structure = parse_tokens(&tokens);
        let same = match (&structure, &c.structure) {
            (Some(a), Some(b)) => a.equivalent(b),
            _ => false,
        };
        if !same {
            return Ok(Caption {
                tokens,
                structure,
                kind: CaptionKind::Negative(NegativeKind::Swap(kind)),
            });
        }
    }
    Err(inapplicable(kind, "no distinct reordering found"))
}

/// Every caption obtained by replacing one attribute value (or the relation)
/// with a different one, in a fixed enumeration order.
pub fn substitution_negatives(c: &Caption, attr: Attribute) -> Vec<Caption> {
    let Some(s) = &c.structure else { return vec![] };
    let ps = s.phrases();
    let mut out = Vec::new();
    let mut emit = |st: CaptionStructure| {
        if !st.equivalent(s) {
            out.push(Caption::from_structure(st, CaptionKind::Negative(NegativeKind::Substitute(attr))));
        }
    };
    match attr {
        Attribute::Relation => {
            if let CaptionStructure::Related(a, r, b) = s {
                for alt in Relation::ALL.into_iter().filter(|x| x != r) {
                    emit(CaptionStructure::Related(*a, alt, *b));
                }
            }
        }
        _ => {
            for i in 0..ps.len() {
                let variants: Vec<Phrase> = match attr {
                    Attribute::Color => Color::ALL
                        .into_iter()
                        .filter(|&v| v != ps[i].color)
                        .map(|v| Phrase { color: v, ..ps[i] })
                        .collect(),
                    Attribute::Shape => Shape::ALL
                        .into_iter()
                        .filter(|&v| v != ps[i].shape)
                        .map(|v| Phrase { shape: v, ..ps[i] })
                        .collect(),
                    Attribute::Size => match ps[i].size {
                        Some(sz) => Size::ALL
                            .into_iter()
                            .filter(|&v| v != sz)
                            .map(|v| Phrase { size: Some(v), ..ps[i] })
                            .collect(),
                        None => vec![],
                    },
                    Attribute::Relation => unreachable!(),
                };
                for v in variants {
                    let mut nps = ps.clone();
                    nps[i] = v;
                    emit(s.with_phrases(&nps));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::scene::{sample_scene, Position, SceneObject};

    fn obj(shape: Shape, color: Color, size: Size, row: u8, col: u8) -> SceneObject {
        SceneObject {
            shape,
            color,
            size,
            pos: Position { row, col },
        }
    }

    fn related() -> SceneSpec {
        SceneSpec {
            objects: vec![
                obj(Shape::Square, Color::Red, Size::Small, 1, 0),
                obj(Shape::Circle, Color::Blue, Size::Large, 1, 2),
            ],
            relation: Some(Relation::LeftOf),
        }
    }

    #[test]
    fn templates() {
        let single = SceneSpec {
            objects: vec![obj(Shape::Square, Color::Red, Size::Small, 0, 0)],
            relation: None,
        };
        assert_eq!(caption_of(&single).surface(), "a small red square");
        assert_eq!(caption_of(&related()).surface(), "a red square left of a blue circle");
        let pair = SceneSpec {
            relation: None,
            ..related()
        };
        assert_eq!(
            caption_of(&pair).surface(),
            "a small red square and a large blue circle"
        );
    }

    #[test]
    fn parse_inverts_templating() {
        for seed in 0..1000 {
            let s = sample_scene(seed);
            let c = caption_of(&s);
            let back = parse(&c.surface()).unwrap();
            assert_eq!(back.structure.unwrap(), asserted_fragment(&s));
            assert!(c.matches(&s));
        }
        assert!(parse("a red square left").is_err());
        assert!(parse("a purple square").is_err());
        assert!(parse("a small red square and").is_err());
    }

    #[test]
    fn swaps_on_relation_caption() {
        let c = caption_of(&related());
        let cs = swap_negative(&c, SwapKind::ColorSwap).unwrap();
        assert_eq!(cs.surface(), "a blue square left of a red circle");
        let rf = swap_negative(&c, SwapKind::RelationFlip).unwrap();
        assert_eq!(rf.surface(), "a red square right of a blue circle");
        let ss = swap_negative(&c, SwapKind::ShapeSwap).unwrap();
        assert_eq!(ss.surface(), "a red circle left of a blue square");
        for neg in [cs, rf, ss] {
            assert!(!neg.matches(&related()));
        }
        assert!(matches!(
            swap_negative(&c, SwapKind::AttributeRebind),
            Err(Error::Inapplicable { .. })
        ));
    }

    #[test]
    fn inapplicable_swaps_are_errors() {
        let single = caption_of(&SceneSpec {
            objects: vec![obj(Shape::Square, Color::Red, Size::Small, 0, 0)],
            relation: None,
        });
        assert!(swap_negative(&single, SwapKind::RelationFlip).is_err());
        assert!(swap_negative(&single, SwapKind::ColorSwap).is_err());
        let same_color = parse("a red square left of a red circle").unwrap();
        assert!(swap_negative(&same_color, SwapKind::ColorSwap).is_err());
        // Swapping colors of otherwise identical phrases in an "and" caption
        // only reorders the conjunction.
        let perm = parse("a large red square and a large blue square").unwrap();
        assert!(swap_negative(&perm, SwapKind::ColorSwap).is_err());
    }

    #[test]
    fn shuffle_keeps_multiset_and_changes_order() {
        for seed in 0..1000 {
            let c = caption_of(&sample_scene(seed));
            let sh = swap_negative(&c, SwapKind::ShuffleOrder).unwrap();
            assert_ne!(sh.tokens, c.tokens);
            let mut a = sh.tokens.clone();
            let mut b = c.tokens.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert!(!sh.matches(&sample_scene(seed)));
            assert_eq!(sh, swap_negative(&c, SwapKind::ShuffleOrder).unwrap());
        }
    }

    #[test]
    fn substitutions_never_match_the_scene() {
        for seed in 0..300 {
            let s = sample_scene(seed);
            let c = caption_of(&s);
            for attr in [Attribute::Color, Attribute::Shape, Attribute::Size, Attribute::Relation] {
                for neg in substitution_negatives(&c, attr) {
                    assert!(!neg.matches(&s), "{} vs {:?}", neg, s);
                }
            }
        }
        let c = caption_of(&related());
        let rel: Vec<String> = substitution_negatives(&c, Attribute::Relation)
            .iter()
            .map(Caption::surface)
            .collect();
        assert_eq!(
            rel,
            [
                "a red square right of a blue circle",
                "a red square above a blue circle",
                "a red square below a blue circle"
            ]
        );
    }
}
