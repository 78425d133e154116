//! Glyph rendering and the analytic pixel readouts used by the metrics.
//!
//! A glyph is a 2x2 arrangement of patch cells inside its quadrant. Every lit
//! cell carries the same fixed 8x8 bump profile scaled by the object's
//! amplitude, so each image is an affine function of its 16 patch means.

use serde::{Deserialize, Serialize};

use super::scene::{
    Category, Scene, Size, CAT_OFFSET, INTENSITY_OFFSET, QUADRANT_OFFSET, SEMANTIC_DIM,
    SIZE_OFFSET,
};

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;
pub const PATCH: usize = 8;
pub const PATCHES: usize = 16;
pub const BACKGROUND: f64 = 0.1;

const LEVELS: [f64; 3] = [0.4, 0.6, 0.8];
const SIZE_GAIN: [f64; 2] = [0.45, 1.0];

/// Lit cells (top-left, top-right, bottom-left, bottom-right) per category.
const GLYPHS: [[f64; 4]; 6] = [
    [1.0, 1.0, 1.0, 1.0], // face
    [1.0, 1.0, 0.0, 0.0], // word
    [0.0, 0.0, 1.0, 1.0], // place
    [1.0, 0.0, 1.0, 0.0], // body
    [1.0, 0.0, 0.0, 1.0], // food
    [0.0, 1.0, 1.0, 0.0], // vehicle
];

pub fn glyph(c: Category) -> [f64; 4] {
    GLYPHS[c.index()]
}

/// Amplitude of an object above background.
pub fn amplitude(intensity: u8, size: Size) -> f64 {
    LEVELS[intensity as usize - 1] * SIZE_GAIN[size.index()]
}

fn profile(i: usize, j: usize) -> f64 {
    let f = |k: usize| (std::f64::consts::PI * (k as f64 + 0.5) / PATCH as f64).sin();
    f(i) * f(j)
}

/// Mean of the per-cell bump profile.
pub fn profile_mean() -> f64 {
    let mut s = 0.0;
    for i in 0..PATCH {
        for j in 0..PATCH {
            s += profile(i, j);
        }
    }
    s / (PATCH * PATCH) as f64
}

/// Patch-grid coordinates (row, col) of cell `k` in `quadrant` (1-based).
fn cell_patch(quadrant: u8, k: usize) -> (usize, usize) {
    let q = quadrant as usize - 1;
    (2 * (q / 2) + k / 2, 2 * (q % 2) + k % 2)
}

/// A 32x32 grayscale image, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), PIXELS, "image must be {SIDE}x{SIDE}");
        Self { pixels }
    }

    pub fn filled(v: f64) -> Self {
        Self::new(vec![v; PIXELS])
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * SIDE + c]
    }

    pub fn clamped(&self) -> Image {
        Image::new(self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Means of the 16 non-overlapping 8x8 patches, row-major over the grid.
    pub fn patch_means(&self) -> [f64; PATCHES] {
        let mut out = [0.0; PATCHES];
        for (r, row) in self.pixels.chunks(SIDE).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                out[(r / PATCH) * 4 + c / PATCH] += v;
            }
        }
        for v in &mut out {
            *v /= (PATCH * PATCH) as f64;
        }
        out
    }

    /// Quantized 8-bit pixels (round half up of `255 * clamp(v)`).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self::new(bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub fn render(scene: &Scene) -> Image {
    let mut px = vec![BACKGROUND; PIXELS];
    for o in &scene.objects {
        let amp = amplitude(o.intensity, o.size);
        for (k, lit) in glyph(o.category).into_iter().enumerate() {
            if lit == 0.0 {
                continue;
            }
            let (pr, pc) = cell_patch(o.quadrant, k);
            for i in 0..PATCH {
                for j in 0..PATCH {
                    let idx = (pr * PATCH + i) * SIDE + pc * PATCH + j;
                    px[idx] = (px[idx] + lit * amp * profile(i, j)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Image::new(px)
}

/// Soft estimate of the semantic multi-hot from pixels alone.
///
/// Per quadrant the four cell amplitudes are matched against the glyph
/// patterns (cosine) and the amplitude against the six size/intensity
/// levels; results are combined with a noisy-OR across quadrants. On a clean
/// render the output is within 1e-3 of [`Scene::semantics`].
pub fn semantic_readout(image: &Image) -> [f64; SEMANTIC_DIM] {
    let pm = image.patch_means();
    let pmean = profile_mean();
    let mut miss = [1.0; SEMANTIC_DIM];
    let mut out = [0.0; SEMANTIC_DIM];
    for quadrant in 1..=4u8 {
        let amps: Vec<f64> = (0..4)
            .map(|k| {
                let (r, c) = cell_patch(quadrant, k);
                ((pm[r * 4 + c] - BACKGROUND) / pmean).max(0.0)
            })
            .collect();
        let energy = amps.iter().copied().fold(0.0, f64::max);
        let occupied = 1.0 / (1.0 + (-(energy - 0.09) / 0.005).exp());
        out[QUADRANT_OFFSET + quadrant as usize - 1] = occupied;

        let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let scores: Vec<f64> = GLYPHS
            .iter()
            .map(|g| {
                let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                40.0 * amps.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (norm * gn)
            })
            .collect();
        let cat_p = softmax(&scores);
        let best = argmax(&cat_p);
        let g = GLYPHS[best];
        let lit: f64 = g.iter().sum();
        let level = amps.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / lit;

        let mut combos = Vec::with_capacity(6);
        for size in Size::ALL {
            for intensity in 1..=3u8 {
                let d = level - amplitude(intensity, size);
                combos.push(-(d * d) / (2.0 * 0.008 * 0.008));
            }
        }
        let combo_p = softmax(&combos);
        let mut int_p = [0.0; 3];
        let mut size_p = [0.0; 2];
        for (i, p) in combo_p.iter().enumerate() {
            size_p[i / 3] += p;
            int_p[i % 3] += p;
        }
        for (k, p) in cat_p.iter().enumerate() {
            miss[CAT_OFFSET + k] *= 1.0 - occupied * p;
        }
        for (k, p) in int_p.iter().enumerate() {
            miss[INTENSITY_OFFSET + k] *= 1.0 - occupied * p;
        }
        for (k, p) in size_p.iter().enumerate() {
            miss[SIZE_OFFSET + k] *= 1.0 - occupied * p;
        }
    }
    for k in 0..SEMANTIC_DIM {
        if !(QUADRANT_OFFSET..SIZE_OFFSET).contains(&k) {
            out[k] = 1.0 - miss[k];
        }
    }
    out
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{sample_scene, SceneObject};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(category: Category, intensity: u8, quadrant: u8, size: Size) -> Scene {
        Scene::new(
            vec![SceneObject {
                category,
                intensity,
                quadrant,
                size,
            }],
            0,
        )
        .unwrap()
    }

    #[test]
    fn empty_quadrants_are_background() {
        let img = render(&single(Category::Face, 3, 1, Size::Large));
        for r in 0..SIDE {
            for c in 0..SIDE {
                if r >= 16 || c >= 16 {
                    assert_eq!(img.get(r, c), BACKGROUND);
                }
            }
        }
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_render() {
        let s = sample_scene(&mut ChaCha8Rng::seed_from_u64(5));
        let (a, b) = (render(&s), render(&s));
        assert!(a
            .pixels()
            .iter()
            .zip(b.pixels())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn intensity_changes_only_glyph_pixels() {
        let a = render(&single(Category::Body, 1, 4, Size::Small));
        let b = render(&single(Category::Body, 3, 4, Size::Small));
        let c = render(&single(Category::Body, 1, 4, Size::Small));
        // mask of pixels that differ from background in either image
        for k in 0..PIXELS {
            let glyph_px = a.pixels()[k] != BACKGROUND || b.pixels()[k] != BACKGROUND;
            if !glyph_px {
                assert_eq!(a.pixels()[k], b.pixels()[k]);
            }
        }
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn readout_recovers_semantics_of_clean_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let s = sample_scene(&mut rng);
            let got = semantic_readout(&render(&s));
            let want = s.semantics();
            for k in 0..SEMANTIC_DIM {
                assert!((got[k] - want[k]).abs() < 1e-3, "{s:?} {got:?}");
            }
        }
    }

    #[test]
    fn patch_means_affine_in_cell_amplitude() {
        let img = render(&single(Category::Face, 2, 2, Size::Large));
        let pm = img.patch_means();
        let want = BACKGROUND + amplitude(2, Size::Large) * profile_mean();
        for idx in [2usize, 3, 6, 7] {
            assert!((pm[idx] - want).abs() < 1e-12);
        }
        assert!((pm[0] - BACKGROUND).abs() < 1e-15);
    }

    #[test]
    fn byte_round_trip_within_quantization() {
        let img = render(&sample_scene(&mut ChaCha8Rng::seed_from_u64(8)));
        let back = Image::from_bytes(&img.to_bytes());
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
