//! Class-rebalancing augmentation planner.
//!
//! Each class's image count `f` is mapped through `f' = ln(b + a·f)` and the
//! scores are scaled to a total target. The logarithm is concave, so rare
//! classes receive proportionally more synthetic samples than common ones.

use serde::{Deserialize, Serialize};

use super::{ClassPalette, DataError, DatasetManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub class_id: u8,
    pub source_count: u64,
    pub score: f64,
    pub target_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub a: f64,
    pub b: f64,
    pub total_target: u64,
    pub entries: Vec<PlanEntry>,
}

impl AugmentationPlan {
    pub fn planned_total(&self) -> u64 {
        self.entries.iter().map(|e| e.target_count).sum()
    }

    pub fn target_for(&self, class_id: u8) -> Option<u64> {
        self.entries.iter().find(|e| e.class_id == class_id).map(|e| e.target_count)
    }

    /// Plain-text table of `f`, `f'` and targets.
    pub fn render(&self, palette: Option<&ClassPalette>) -> String {
        let mut out = format!("a={} b={} total_target={} planned={}\n", self.a, self.b, self.total_target, self.planned_total());
        out.push_str(&format!("{:>4}  {:<24} {:>8} {:>10} {:>8}\n", "id", "name", "f", "f'", "target"));
        for e in &self.entries {
            let name = palette.and_then(|p| p.name(e.class_id)).unwrap_or("");
            out.push_str(&format!("{:>4}  {:<24} {:>8} {:>10.4} {:>8}\n", e.class_id, name, e.source_count, e.score, e.target_count));
        }
        out
    }
}

/// Number of samples whose mask contains at least one pixel of each palette id.
pub fn class_frequencies(m: &DatasetManifest, palette: &ClassPalette) -> Vec<u64> {
    let mut counts = vec![0u64; palette.len()];
    for s in &m.samples {
        for v in s.mask.distinct() {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
    }
    counts
}

/// Plans per-class targets from `(class id, source count)` pairs.
///
/// `target_c = round(T · f'_c / Σ f')`; with `b = 1` a class with no source
/// images scores 0 and receives no target.
pub fn plan_augmentation(counts: &[(u8, u64)], a: f64, b: f64, total_target: u64) -> Result<AugmentationPlan, DataError> {
    if !(a > 0.0) || !(b >= 1.0) || !a.is_finite() || !b.is_finite() {
        return Err(DataError::Parameter(format!("need a > 0 and b >= 1, got a={a} b={b}")));
    }
    if total_target == 0 {
        return Err(DataError::Parameter("total_target must be positive".into()));
    }
    if counts.iter().all(|&(_, f)| f == 0) {
        return Err(DataError::EmptyDataset);
    }
    let scores: Vec<f64> = counts.iter().map(|&(_, f)| (b + a * f as f64).ln()).collect();
    let sum: f64 = scores.iter().sum();
    let entries = counts
        .iter()
        .zip(&scores)
        .map(|(&(class_id, source_count), &score)| PlanEntry {
            class_id,
            source_count,
            score,
            target_count: (total_target as f64 * score / sum).round() as u64,
        })
        .collect();
    Ok(AugmentationPlan { a, b, total_target, entries })
}
