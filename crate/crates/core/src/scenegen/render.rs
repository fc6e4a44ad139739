//! Rasterizer for scene specs.
//!
//! Images are 32x32 RGB with solid shapes over a flat gray background.
//! Rendering happens in 8-bit space and the float tensor is derived from the
//! bytes with `v = b / 127.5 - 1`, so an image and its stored bytes always
//! agree exactly.

use rand::Rng;

use super::scene::{Color, SceneObject, SceneSpec, Shape, Size};
use crate::numerics::Tensor;
use crate::rng::rng_from_seed;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

/// Background byte value (all three channels).
pub const GRAY_BYTE: u8 = 127;
/// Background value in tensor space, `127 / 127.5 - 1`.
pub const GRAY_VALUE: f64 = GRAY_BYTE as f64 / 127.5 - 1.0;

/// Cell centers in pixels, indexed by grid row/column.
const CELL_CENTER: [f64; 3] = [6.0, 16.0, 26.0];
/// Maximum absolute positional jitter in pixels.
pub const JITTER: f64 = 1.0;

pub fn byte_to_value(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn extent(size: Size) -> f64 {
    match size {
        Size::Small => 6.0,
        Size::Large => 10.0,
    }
}

pub fn color_bytes(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [255, 0, 0],
        Color::Green => [0, 255, 0],
        Color::Blue => [0, 0, 255],
        Color::Yellow => [255, 255, 0],
    }
}

/// A rendered scene: `H x W x 3` values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn from_bytes(bytes: &[u8]) -> ImageTensor {
        assert_eq!(bytes.len(), IMAGE_LEN, "image byte length");
        let data = bytes.iter().map(|&b| byte_to_value(b)).collect();
        ImageTensor(Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).unwrap())
    }

    /// Wraps an `H x W x 3` tensor; values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: Tensor) -> Option<ImageTensor> {
        if t.shape() != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
            return None;
        }
        Some(ImageTensor(t.map(|v| v.clamp(-1.0, 1.0))))
    }

    /// Constant mid-gray image.
    pub fn gray() -> ImageTensor {
        ImageTensor::from_bytes(&[GRAY_BYTE; IMAGE_LEN])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// Nearest 8-bit encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .data()
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        let d = self.0.data();
        [d[i], d[i + 1], d[i + 2]]
    }
}

fn covers(o: &SceneObject, cx: f64, cy: f64, px: f64, py: f64) -> bool {
    let half = extent(o.size) / 2.0;
    let (dx, dy) = (px - cx, py - cy);
    match o.shape {
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Circle => dx * dx + dy * dy <= half * half,
        // Upward-pointing isosceles triangle with base and height `2 * half`.
        Shape::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
    }
}

/// Object centers after jitter, in draw order.
pub fn object_centers(spec: &SceneSpec, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_from_seed(seed);
    spec.objects
        .iter()
        .map(|o| {
            let jx = rng.random_range(-JITTER..=JITTER);
            let jy = rng.random_range(-JITTER..=JITTER);
            (
                CELL_CENTER[o.pos.col as usize] + jx,
                CELL_CENTER[o.pos.row as usize] + jy,
            )
        })
        .collect()
}

/// Rasterize into interleaved 8-bit RGB, row-major.
pub fn render_bytes(spec: &SceneSpec, seed: u64) -> Vec<u8> {
    let mut px = vec![GRAY_BYTE; IMAGE_LEN];
    let centers = object_centers(spec, seed);
    for (o, &(cx, cy)) in spec.objects.iter().zip(&centers) {
        let rgb = color_bytes(o.color);
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                if covers(o, cx, cy, col as f64 + 0.5, row as f64 + 0.5) {
                    let i = (row * IMAGE_SIZE + col) * CHANNELS;
                    px[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    px
}

pub fn render(spec: &SceneSpec, seed: u64) -> ImageTensor {
    ImageTensor::from_bytes(&render_bytes(spec, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::scene::{sample_scene, Position};

    fn red_square() -> SceneSpec {
        SceneSpec {
            objects: vec![SceneObject {
                shape: Shape::Square,
                color: Color::Red,
                size: Size::Large,
                pos: Position { row: 1, col: 1 },
            }],
            relation: None,
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        for seed in 0..50 {
            let s = sample_scene(seed);
            assert_eq!(render(&s, seed), render(&s, seed));
        }
    }

    #[test]
    fn red_square_interior_is_red_and_background_gray() {
        let img = render(&red_square(), 3);
        // Cell center is (16, 16) +- 1, the square spans +-5: the 3x3 block
        // around the center is always inside.
        for r in 14..=17 {
            for c in 14..=17 {
                let [red, g, b] = img.pixel(r, c);
                assert!(red > g && red > b);
                assert_eq!(red, 1.0);
            }
        }
        for (r, c) in [(0, 0), (31, 31), (0, 31), (2, 16)] {
            assert_eq!(img.pixel(r, c), [GRAY_VALUE; 3]);
        }
    }

    #[test]
    fn values_stay_in_range_and_bytes_round_trip() {
        for seed in 0..50 {
            let img = render(&sample_scene(seed), seed);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(ImageTensor::from_bytes(&img.to_bytes()), img);
        }
    }
}
