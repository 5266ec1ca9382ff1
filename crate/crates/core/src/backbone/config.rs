use serde::{Deserialize, Serialize};

use crate::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    /// Block indices at which an inject/extract pair wraps the following block group.
    pub interaction_points: Vec<usize>,
    /// Attention heads in the injector and extractor.
    pub adapter_heads: usize,
    /// Spatial reductions of the prior feature maps, finest first.
    pub scales: Vec<usize>,
    /// Base channel count of the convolutional stem.
    pub stem_channels: usize,
    /// Image extent (height, width) the positional embeddings are laid out for;
    /// other extents interpolate them.
    pub image_size: (usize, usize),
}

/// Splits `depth` blocks into `count` groups of `ceil(depth / count)` and
/// returns each group's first block.
pub fn evenly_spaced_points(depth: usize, count: usize) -> Vec<usize> {
    if count == 0 || depth == 0 {
        return Vec::new();
    }
    let step = depth.div_ceil(count);
    (0..count).map(|i| i * step).filter(|&p| p < depth).collect()
}

impl BackboneConfig {
    /// Depth 4, width 64, two interaction points.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            embed_dim: 64,
            heads: 4,
            patch_size: 16,
            mlp_ratio: 4,
            interaction_points: evenly_spaced_points(4, 2),
            adapter_heads: 1,
            scales: vec![8, 16, 32],
            stem_channels: 16,
            image_size: (128, 128),
        }
    }

    /// 24 blocks with five interaction points (groups of 5/5/5/5/4).
    pub fn full() -> Self {
        Self {
            depth: 24,
            embed_dim: 256,
            heads: 8,
            patch_size: 16,
            mlp_ratio: 4,
            interaction_points: evenly_spaced_points(24, 5),
            adapter_heads: 1,
            scales: vec![8, 16, 32],
            stem_channels: 32,
            image_size: (640, 2048),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.adapter_heads == 0 || self.embed_dim % self.adapter_heads != 0 {
            return bad(format!("embed_dim {} not divisible by adapter_heads {}", self.embed_dim, self.adapter_heads));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.stem_channels == 0 {
            return bad("patch_size, mlp_ratio and stem_channels must be positive".into());
        }
        if self.interaction_points.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("interaction points {:?} must be sorted and unique", self.interaction_points));
        }
        if self.interaction_points.iter().any(|&p| p >= self.depth) {
            return bad(format!("interaction points {:?} must lie in [0, {})", self.interaction_points, self.depth));
        }
        if self.scales.is_empty()
            || self.scales[0] != 8
            || self.scales.windows(2).any(|w| w[1] != 2 * w[0])
        {
            return bad(format!("scales {:?} must be successive halvings starting at 1/8", self.scales));
        }
        let (h, w) = self.image_size;
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return bad(format!("image_size {:?} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        Ok(())
    }

    pub fn max_reduction(&self) -> usize {
        *self.scales.last().expect("validated scales")
    }

    /// Positional-embedding grid (rows, cols).
    pub fn pos_grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    /// Block index ranges, each wrapped by the interaction at its start.
    pub fn block_groups(&self) -> Vec<std::ops::Range<usize>> {
        let pts = &self.interaction_points;
        pts.iter()
            .enumerate()
            .map(|(i, &p)| p..pts.get(i + 1).copied().unwrap_or(self.depth))
            .collect()
    }

    /// Checks that an `h × w` image satisfies the patch and reduction divisibility.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let lcm = self.patch_size / gcd(self.patch_size, self.max_reduction()) * self.max_reduction();
        if h == 0 || w == 0 || h % lcm != 0 || w % lcm != 0 {
            return Err(ModelError::Geometry(format!(
                "image extent {h}×{w} must be divisible by {lcm} (patch size {} and reduction {}); resize the input first",
                self.patch_size,
                self.max_reduction()
            )));
        }
        Ok(())
    }
}
