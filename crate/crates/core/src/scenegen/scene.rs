use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;

pub const GRID: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
}

/// Cell on the 3x3 layout grid; row 0 is the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub row: u8,
    pub col: u8,
}

impl Position {
    pub fn all() -> impl Iterator<Item = Position> {
        (0..GRID).flat_map(|row| (0..GRID).map(move |col| Position { row, col }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub pos: Position,
}

/// Spatial relation of the first object to the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    /// Whether `a` stands in this relation to `b`. Horizontal relations need
    /// a shared row and vertical ones a shared column, so at most one
    /// relation holds for any pair of cells.
    pub fn holds(self, a: Position, b: Position) -> bool {
        match self {
            Relation::LeftOf => a.row == b.row && a.col < b.col,
            Relation::RightOf => a.row == b.row && a.col > b.col,
            Relation::Above => a.col == b.col && a.row < b.row,
            Relation::Below => a.col == b.col && a.row > b.row,
        }
    }

    pub fn between(a: Position, b: Position) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.holds(a, b))
    }
}

/// The three scene families the generator draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// One object, captioned with size, color and shape.
    Single,
    /// Two objects joined by "and", each with size, color and shape.
    Pair,
    /// Two objects joined by a spatial relation, captioned without sizes.
    Related,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Single, SceneKind::Pair, SceneKind::Related];
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
}

impl SceneSpec {
    pub fn kind(&self) -> SceneKind {
        match (self.objects.len(), self.relation) {
            (1, _) => SceneKind::Single,
            (_, None) => SceneKind::Pair,
            (_, Some(_)) => SceneKind::Related,
        }
    }

    /// Checks the structural invariants: 1-2 objects, distinct positions,
    /// relation only between two objects and consistent with their cells.
    pub fn is_valid(&self) -> bool {
        let in_grid = self
            .objects
            .iter()
            .all(|o| o.pos.row < GRID && o.pos.col < GRID);
        match self.objects.as_slice() {
            [_] => in_grid && self.relation.is_none(),
            [a, b] => {
                in_grid
                    && a.pos != b.pos
                    && self.relation.is_none_or(|r| r.holds(a.pos, b.pos))
            }
            _ => false,
        }
    }

    /// Attribute-level edit distance between scenes with the same object
    /// count: one unit per differing (object, attribute) pair over shape,
    /// color, size and cell. The relation is a function of the cells and is
    /// not counted separately. `None` if object counts differ.
    pub fn edit_distance(&self, other: &SceneSpec) -> Option<usize> {
        if self.objects.len() != other.objects.len() {
            return None;
        }
        Some(
            self.objects
                .iter()
                .zip(&other.objects)
                .map(|(a, b)| {
                    usize::from(a.shape != b.shape)
                        + usize::from(a.color != b.color)
                        + usize::from(a.size != b.size)
                        + usize::from(a.pos != b.pos)
                })
                .sum(),
        )
    }

    /// Structural hash used to split the scene space into train and
    /// held-out partitions.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("scene serializes");
        crate::rng::derive_seed(0, &text, 0)
    }
}

fn random_object<R: Rng>(rng: &mut R, pos: Position) -> SceneObject {
    SceneObject {
        shape: *Shape::ALL.choose(rng).unwrap(),
        color: *Color::ALL.choose(rng).unwrap(),
        size: *Size::ALL.choose(rng).unwrap(),
        pos,
    }
}

/// Draw a scene of the given kind, uniformly over that kind's legal specs.
pub fn sample_scene_of_kind<R: Rng>(kind: SceneKind, rng: &mut R) -> SceneSpec {
    let cells: Vec<Position> = Position::all().collect();
    match kind {
        SceneKind::Single => {
            let pos = *cells.choose(rng).unwrap();
            SceneSpec {
                objects: vec![random_object(rng, pos)],
                relation: None,
            }
        }
        SceneKind::Pair => {
            let picked: Vec<Position> = cells.choose_multiple(rng, 2).copied().collect();
            SceneSpec {
                objects: vec![random_object(rng, picked[0]), random_object(rng, picked[1])],
                relation: None,
            }
        }
        SceneKind::Related => {
            // Ordered pairs of distinct cells sharing a row or a column.
            let aligned: Vec<(Position, Position)> = cells
                .iter()
                .flat_map(|&a| cells.iter().map(move |&b| (a, b)))
                .filter(|(a, b)| a != b && (a.row == b.row || a.col == b.col))
                .collect();
            let (a, b) = *aligned.choose(rng).unwrap();
            SceneSpec {
                objects: vec![random_object(rng, a), random_object(rng, b)],
                relation: Relation::between(a, b),
            }
        }
    }
}

/// Scene from a seed: kind uniform over [`SceneKind::ALL`], then uniform
/// within the kind.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut rng = rng_from_seed(seed);
    let kind = *SceneKind::ALL.choose(&mut rng).unwrap();
    sample_scene_of_kind(kind, &mut rng)
}
