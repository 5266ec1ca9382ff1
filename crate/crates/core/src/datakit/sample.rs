use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numkit::ResizePlan;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 8-bit grayscale intensities.
pub type GrayImage = Grid<u8>;
/// Per-pixel palette ids.
pub type LabelMask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value at the nearest in-range pixel of a continuous coordinate.
    pub fn clamped(&self, x: isize, y: isize) -> T {
        let xi = x.clamp(0, self.width as isize - 1) as usize;
        let yi = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xi, yi)
    }
}

impl Grid<u8> {
    /// Nearest-neighbor resize with half-pixel centers.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.extent() {
            return self.clone();
        }
        let map = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
        Self::from_fn(width, height, |x, y| self.get(map(x, width, self.width), map(y, height, self.height)))
    }

    /// Bilinear resize with half-pixel centers, rounded back to 8 bits.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.extent() {
            return self.clone();
        }
        let plan = ResizePlan::new(self.height, self.width, height, width);
        let src: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let out = plan.forward(&src, 1);
        Self { width, height, data: out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect() }
    }

    /// Sorted set of distinct values.
    pub fn distinct(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Opg,
    Periapical,
    Bitewing,
}

/// A grayscale radiograph with its per-pixel class mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    pub image: GrayImage,
    pub mask: LabelMask,
    pub source_kind: SourceKind,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: LabelMask, source_kind: SourceKind) -> Result<Self, DataError> {
        let id = id.into();
        if image.extent() != mask.extent() {
            return Err(DataError::Geometry { id, image: image.extent(), mask: mask.extent() });
        }
        Ok(Self { id, image, mask, source_kind })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Resizes the image bilinearly and the mask by nearest neighbor; label ids
/// are never interpolated.
pub fn resize_sample(s: &ImageSample, width: usize, height: usize) -> ImageSample {
    assert!(width >= 1 && height >= 1, "resize target must be at least 1×1");
    ImageSample {
        id: s.id.clone(),
        image: s.image.resize_bilinear(width, height),
        mask: s.mask.resize_nearest(width, height),
        source_kind: s.source_kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> ImageSample {
        let image = Grid::from_fn(w, h, |x, y| ((x * 31 + y * 17) % 256) as u8);
        let mask = Grid::from_fn(w, h, |x, _| if x < w / 2 { 1 } else { 2 });
        ImageSample::new("s", image, mask, SourceKind::Opg).unwrap()
    }

    #[test]
    fn resize_to_same_extent_is_identity() {
        let s = sample(7, 5);
        assert_eq!(resize_sample(&s, 7, 5), s);
    }

    #[test]
    fn constant_mask_stays_constant() {
        let s = ImageSample::new("c", Grid::filled(9, 6, 10), Grid::filled(9, 6, 3), SourceKind::Opg).unwrap();
        for (w, h) in [(1, 1), (4, 13), (20, 2)] {
            let r = resize_sample(&s, w, h);
            assert_eq!(r.mask.distinct(), vec![3]);
            assert_eq!(r.image.distinct(), vec![10]);
        }
    }

    #[test]
    fn nearest_matches_index_mapping_oracle() {
        // 4×4 mask, left half 1 / right half 2 with a distinct top-left quadrant
        let mask = Grid::from_fn(4, 4, |x, y| match (x < 2, y < 2) {
            (true, true) => 5,
            (true, false) => 1,
            _ => 2,
        });
        let s = ImageSample::new("m", Grid::filled(4, 4, 0), mask.clone(), SourceKind::Opg).unwrap();
        let r = resize_sample(&s, 2, 2);
        // output pixel o samples source floor((o + 0.5) * 2) = 1 + 2o
        for oy in 0..2 {
            for ox in 0..2 {
                assert_eq!(r.mask.get(ox, oy), mask.get(1 + 2 * ox, 1 + 2 * oy));
            }
        }
        assert_eq!(r.mask.data(), &[5, 2, 1, 2]);
    }

    #[test]
    fn mask_values_subset_after_resize() {
        let s = sample(13, 11);
        for (w, h) in [(3, 3), (40, 7), (2, 30)] {
            let r = resize_sample(&s, w, h);
            assert!(r.mask.distinct().iter().all(|v| s.mask.distinct().contains(v)));
        }
    }

    #[test]
    fn extent_mismatch_is_a_geometry_error() {
        let err = ImageSample::new("x", Grid::filled(3, 3, 0), Grid::filled(3, 4, 0), SourceKind::Opg).unwrap_err();
        assert!(matches!(err, DataError::Geometry { .. }));
    }
}
