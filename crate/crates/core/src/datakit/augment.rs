use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grid, GrayImage, ImageSample};

/// Bounds for the random transforms applied by [`apply_augmentations`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Rotation angle drawn uniformly from `[-max, +max]` degrees.
    pub max_rotation_deg: f64,
    /// Additive intensity offset drawn from `[-b, +b]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, max_rotation_deg: 10.0, brightness: 20.0, contrast: 0.2 }
    }
}

pub fn hflip(s: &ImageSample) -> ImageSample {
    let (w, h) = s.image.extent();
    ImageSample {
        id: s.id.clone(),
        image: Grid::from_fn(w, h, |x, y| s.image.get(w - 1 - x, y)),
        mask: Grid::from_fn(w, h, |x, y| s.mask.get(w - 1 - x, y)),
        source_kind: s.source_kind,
    }
}

/// Rotates about the image center. Out-of-frame samples clamp to the border,
/// so the rotated mask only holds values present in the source mask.
pub fn rotate(s: &ImageSample, degrees: f64) -> ImageSample {
    let (w, h) = s.image.extent();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // inverse map from destination pixel to source coordinate
    let src = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
    };
    let image = Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let p = |ox: isize, oy: isize| s.image.clamped(x0 as isize + ox, y0 as isize + oy) as f64;
        let v = (p(0, 0) * (1.0 - fx) + p(1, 0) * fx) * (1.0 - fy) + (p(0, 1) * (1.0 - fx) + p(1, 1) * fx) * fy;
        v.round().clamp(0.0, 255.0) as u8
    });
    let mask = Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        s.mask.clamped(sx.round() as isize, sy.round() as isize)
    });
    ImageSample { id: s.id.clone(), image, mask, source_kind: s.source_kind }
}

/// `v ← (v − mean)·gain + mean + offset`, clamped to 8 bits.
pub fn jitter(image: &GrayImage, offset: f64, gain: f64) -> GrayImage {
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len().max(1) as f64;
    let data = image.data().iter().map(|&v| ((v as f64 - mean) * gain + mean + offset).round().clamp(0.0, 255.0) as u8).collect();
    Grid::new(image.width(), image.height(), data).expect("same extent")
}

/// `count` random variants of `s`, deterministic in `seed`. Geometry applies
/// to image and mask alike; intensity jitter touches the image only.
pub fn apply_augmentations(s: &ImageSample, count: usize, seed: u64, cfg: &AugmentConfig) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
            let angle = if cfg.max_rotation_deg > 0.0 { rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg) } else { 0.0 };
            let offset = if cfg.brightness > 0.0 { rng.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
            let gain = if cfg.contrast > 0.0 { rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) } else { 1.0 };
            let mut v = if flip { hflip(s) } else { s.clone() };
            if angle != 0.0 {
                v = rotate(&v, angle);
            }
            v.image = jitter(&v.image, offset, gain);
            v.id = format!("{}-a{seed}-{i}", s.id);
            v
        })
        .collect()
}
