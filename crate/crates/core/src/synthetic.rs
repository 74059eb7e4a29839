//! Deterministic synthetic images for toy runs, tests and bundled fixtures.

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { top: f32, left: f32, bottom: f32, right: f32 },
}

impl Shape {
    /// Coordinates are fractions of the image side.
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => y >= top && y <= bottom && x >= left && x <= right,
        }
    }
}

/// Layout (shapes) and appearance (palette, stripe texture) of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub background: [[f32; 3]; 2],
    pub palette: Vec<[f32; 3]>,
    /// Stripe period in pixels painted over shapes; 0 for flat fill.
    pub stripes: usize,
}

impl Scene {
    pub fn render(&self, height: usize, width: usize, device: &Device, dtype: DType) -> Result<ImageTensor> {
        ImageTensor::from_fn(height, width, device, dtype, |y, x| {
            let fy = (y as f32 + 0.5) / height as f32;
            let fx = (x as f32 + 0.5) / width as f32;
            let [top, bottom] = self.background;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = top[c] * (1.0 - fy) + bottom[c] * fy;
            }
            for (i, s) in self.shapes.iter().enumerate() {
                if s.contains(fy, fx) {
                    let color = self.palette[i % self.palette.len()];
                    let shade = if self.stripes > 0 && ((x + y) / self.stripes) % 2 == 1 {
                        0.75
                    } else {
                        1.0
                    };
                    px = color.map(|v| v * shade);
                }
            }
            px
        })
    }

    /// The same layout under another scene's colors and texture.
    pub fn with_appearance_of(&self, other: &Scene) -> Scene {
        Scene {
            shapes: self.shapes.clone(),
            background: other.background,
            palette: other.palette.clone(),
            stripes: other.stripes,
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// A random layout of 2-4 shapes with a random palette.
pub fn random_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(2..=4);
    let shapes = (0..count)
        .map(|_| {
            if rng.random_bool(0.5) {
                Shape::Disc {
                    cy: rng.random_range(0.2..0.8),
                    cx: rng.random_range(0.2..0.8),
                    r: rng.random_range(0.1..0.3),
                }
            } else {
                let top = rng.random_range(0.05..0.6);
                let left = rng.random_range(0.05..0.6);
                Shape::Rect {
                    top,
                    left,
                    bottom: top + rng.random_range(0.15..0.4),
                    right: left + rng.random_range(0.15..0.4),
                }
            }
        })
        .collect();
    Scene {
        shapes,
        background: [color(&mut rng), color(&mut rng)],
        palette: (0..count).map(|_| color(&mut rng)).collect(),
        stripes: if rng.random_bool(0.5) { rng.random_range(3..9) } else { 0 },
    }
}

/// A single centered subject ("animal-like" blob with a head) whose pose
/// varies with the seed; the layout family used for toy domains.
pub fn subject_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = rng.random_range(0.5..0.62);
    let cx = rng.random_range(0.4..0.6);
    let r = rng.random_range(0.2..0.26);
    let head_dx = if rng.random_bool(0.5) { 0.22 } else { -0.22 };
    Scene {
        shapes: vec![
            Shape::Disc { cy, cx, r },
            Shape::Disc {
                cy: cy - 0.22,
                cx: cx + head_dx,
                r: r * 0.55,
            },
        ],
        background: [color(&mut rng), color(&mut rng)],
        palette: vec![color(&mut rng), color(&mut rng)],
        stripes: if rng.random_bool(0.5) { rng.random_range(3..7) } else { 0 },
    }
}

/// The 128-px (structure, appearance) fixture pair.
pub fn fixture_pair(size: usize, device: &Device, dtype: DType) -> Result<(ImageTensor, ImageTensor)> {
    let structure = subject_scene(11).render(size, size, device, dtype)?;
    let appearance = subject_scene(29).render(size, size, device, dtype)?;
    Ok((structure, appearance))
}

/// Per-pixel uniform noise; a stand-in for an image unlike any scene.
pub fn noise_image(seed: u64, size: usize, device: &Device, dtype: DType) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..size * size * 3).map(|_| rng.random()).collect();
    ImageTensor::from_hwc(size, size, &data, device, dtype)
}

/// `n` subject images, ids `img_000.png`, ... in order.
pub fn subject_set(n: usize, size: usize, seed: u64, device: &Device, dtype: DType) -> Result<Vec<(String, ImageTensor)>> {
    (0..n)
        .map(|i| {
            let img = subject_scene(seed.wrapping_mul(1000).wrapping_add(i as u64)).render(size, size, device, dtype)?;
            Ok((format!("img_{i:03}.png"), img))
        })
        .collect()
}
