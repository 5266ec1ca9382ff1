//! Masked image modeling: visual-token targets from a k-means codebook and a
//! classification head that predicts them at masked patch positions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patchify;
use crate::nn::{Binding, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::numkit::{Graph, Tensor, Var};
use crate::ModelError;

/// Patch prototypes; a patch's visual token is the id of its nearest code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualCodebook {
    pub patch_size: usize,
    /// `K` rows of `patch_size²` values.
    pub codes: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(codes: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in codes.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

impl VisualCodebook {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// One token per patch in raster order; ties go to the lowest id.
    pub fn tokenize(&self, image: &Tensor) -> Result<Vec<usize>, ModelError> {
        let patches = patchify(image, self.patch_size)?;
        let width = self.patch_size * self.patch_size;
        Ok(patches.data().chunks(width).map(|p| nearest(&self.codes, p)).collect())
    }
}

/// Lloyd's k-means over all patches of `images`, seeded from `k` distinct patches.
pub fn fit_codebook(images: &[Tensor], patch_size: usize, k: usize, seed: u64) -> Result<VisualCodebook, ModelError> {
    let width = patch_size * patch_size;
    let mut patches: Vec<Vec<f64>> = Vec::new();
    for img in images {
        let p = patchify(img, patch_size)?;
        patches.extend(p.data().chunks(width).map(<[f64]>::to_vec));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for i in order {
            if distinct.len() == k {
                break;
            }
            if !distinct.iter().any(|d| *d == &patches[i]) {
                distinct.push(&patches[i]);
            }
        }
    }
    if k == 0 || distinct.len() < k {
        return Err(ModelError::Cardinality { needed: k, found: distinct.len() });
    }
    let mut codes: Vec<Vec<f64>> = distinct.into_iter().cloned().collect();
    let mut assign = vec![usize::MAX; patches.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&patches) {
            let n = nearest(&codes, p);
            changed |= *a != n;
            *a = n;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(&patches) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((code, sum), n) in codes.iter_mut().zip(sums).zip(counts) {
            // an emptied cluster keeps its previous center
            if n > 0 {
                *code = sum.into_iter().map(|s| s / n as f64).collect();
            }
        }
    }
    Ok(VisualCodebook { patch_size, codes })
}

/// Picks `round(ratio·n)` positions uniformly without replacement.
pub fn mask_positions(n: usize, ratio: f64, seed: u64) -> BTreeSet<usize> {
    let count = ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.into_iter().take(count).collect()
}

/// Replaces the rows of `tokens` at `masked` by `mask_emb` (`1×D`).
pub fn replace_rows(g: &mut Graph, tokens: Var, mask_emb: Var, masked: &BTreeSet<usize>) -> Result<Var, ModelError> {
    let (n, d) = (g.shape(tokens)[0], g.shape(tokens)[1]);
    let keep: Vec<f64> = (0..n).flat_map(|i| std::iter::repeat(if masked.contains(&i) { 0.0 } else { 1.0 }).take(d)).collect();
    let hit = Tensor::new(&[n, 1], (0..n).map(|i| if masked.contains(&i) { 1.0 } else { 0.0 }).collect())?;
    let keep = g.constant(Tensor::new(&[n, d], keep)?);
    let hit = g.constant(hit);
    let kept = g.mul(tokens, keep)?;
    let filled = g.matmul(hit, mask_emb)?;
    Ok(g.add(kept, filled)?)
}

/// Masks a seeded random `ratio` of the token rows.
pub fn mim_corrupt(g: &mut Graph, tokens: Var, ratio: f64, mask_emb: Var, seed: u64) -> Result<(Var, BTreeSet<usize>), ModelError> {
    let masked = mask_positions(g.shape(tokens)[0], ratio, seed);
    Ok((replace_rows(g, tokens, mask_emb, &masked)?, masked))
}

/// Mean cross-entropy over masked positions only.
pub fn mim_loss(g: &mut Graph, logits: Var, targets: &[usize], masked: &BTreeSet<usize>) -> Result<Var, ModelError> {
    if masked.is_empty() {
        return Err(ModelError::DegenerateBatch);
    }
    let weights: Vec<f64> = (0..targets.len()).map(|i| if masked.contains(&i) { 1.0 } else { 0.0 }).collect();
    Ok(g.cross_entropy(logits, targets, &weights)?)
}

/// Learned mask embedding and the token classifier.
#[derive(Clone, Debug)]
pub struct MimHead {
    pub mask_emb: ParamId,
    pub norm: LayerNorm,
    pub classifier: Linear,
}

impl MimHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, vocab: usize) -> Self {
        Self {
            mask_emb: store.add("mim.mask_embedding", init.uniform(&[1, dim], 0.02)),
            norm: LayerNorm::new(store, "mim.norm", dim),
            classifier: Linear::new(store, init, "mim.classifier", dim, vocab),
        }
    }

    pub fn logits(&self, g: &mut Graph, b: &Binding, states: Var) -> Result<Var, ModelError> {
        let h = self.norm.forward(g, b, states)?;
        Ok(self.classifier.forward(g, b, h)?)
    }
}
