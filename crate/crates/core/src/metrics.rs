//! Confusion-matrix segmentation metrics and model report comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::{ClassPalette, LabelMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("geometry error: prediction is {pred:?} but ground truth is {gt:?}")]
    Geometry { pred: (usize, usize), gt: (usize, usize) },
    #[error("label {label} outside the {classes}-class matrix")]
    Label { label: u8, classes: usize },
    #[error("degenerate evaluation: no class has any pixels")]
    DegenerateEvaluation,
    #[error("duplicate model name {0:?}")]
    Naming(String),
    #[error("need at least 2 reports to compare, got {0}")]
    TooFewReports(usize),
    #[error("cannot read {path}: {message}")]
    Report { path: PathBuf, message: String },
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix over ids `0..classes`, background included.
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<(), MetricsError> {
        if pred.extent() != gt.extent() {
            return Err(MetricsError::Geometry { pred: pred.extent(), gt: gt.extent() });
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            let bad = if usize::from(p) >= self.classes { Some(p) } else if usize::from(t) >= self.classes { Some(t) } else { None };
            if let Some(label) = bad {
                return Err(MetricsError::Label { label, classes: self.classes });
            }
            self.counts[usize::from(t) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, c)).sum()
    }

    fn ids(&self, include_background: bool) -> impl Iterator<Item = usize> {
        usize::from(!include_background)..self.classes
    }

    /// `TP / (TP + FP + FN)` for every class with a nonempty union.
    pub fn iou_per_class(&self, include_background: bool) -> BTreeMap<usize, f64> {
        self.ids(include_background)
            .filter_map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| (c, tp as f64 / union as f64))
            })
            .collect()
    }

    /// `TP / row sum` for every class with ground-truth pixels.
    pub fn acc_per_class(&self, include_background: bool) -> BTreeMap<usize, f64> {
        self.ids(include_background)
            .filter_map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| (c, self.get(c, c) as f64 / n as f64))
            })
            .collect()
    }

    pub fn miou(&self, include_background: bool) -> Result<f64, MetricsError> {
        mean(self.iou_per_class(include_background).values())
    }

    pub fn macc(&self, include_background: bool) -> Result<f64, MetricsError> {
        mean(self.acc_per_class(include_background).values())
    }

    /// Report for `model_name`; class names come from `palette` when given.
    pub fn report(&self, model_name: &str, palette: Option<&ClassPalette>, include_background: bool) -> Result<MetricReport, MetricsError> {
        let iou = self.iou_per_class(include_background);
        let acc = self.acc_per_class(include_background);
        let per_class = iou
            .keys()
            .chain(acc.keys())
            .copied()
            .collect::<BTreeSet<usize>>()
            .into_iter()
            .map(|c| ClassRow {
                id: c,
                name: palette.and_then(|p| p.name(c as u8)).unwrap_or("").to_string(),
                iou: iou.get(&c).copied(),
                acc: acc.get(&c).copied(),
            })
            .collect();
        Ok(MetricReport {
            model_name: model_name.to_string(),
            pixel_total: self.total(),
            per_class,
            miou: self.miou(include_background)?,
            macc: self.macc(include_background)?,
        })
    }
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> Result<f64, MetricsError> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(MetricsError::DegenerateEvaluation);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub id: usize,
    #[serde(default)]
    pub name: String,
    /// Omitted for classes absent from both prediction and ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    /// Omitted for classes without ground-truth pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_name: String,
    #[serde(default)]
    pub pixel_total: u64,
    #[serde(default)]
    pub per_class: Vec<ClassRow>,
    pub miou: f64,
    pub macc: f64,
}

impl MetricReport {
    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let err = |message: String| MetricsError::Report { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| MetricsError::Report { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_name: String,
    pub miou: f64,
    pub macc: f64,
    /// `miou − best miou`, zero or negative.
    pub miou_delta: f64,
    pub macc_delta: f64,
}

/// Ranks reports by mIoU, best first, with deltas against the best.
pub fn compare_reports(reports: &[MetricReport]) -> Result<Vec<ComparisonRow>, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let mut seen = BTreeSet::new();
    for r in reports {
        if !seen.insert(r.model_name.as_str()) {
            return Err(MetricsError::Naming(r.model_name.clone()));
        }
    }
    let mut sorted: Vec<&MetricReport> = reports.iter().collect();
    sorted.sort_by(|a, b| b.miou.total_cmp(&a.miou).then_with(|| a.model_name.cmp(&b.model_name)));
    let best = sorted[0];
    Ok(sorted
        .into_iter()
        .map(|r| ComparisonRow {
            model_name: r.model_name.clone(),
            miou: r.miou,
            macc: r.macc,
            miou_delta: r.miou - best.miou,
            macc_delta: r.macc - best.macc,
        })
        .collect())
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<20} {:>8} {:>8} {:>10} {:>10}\n", "model", "mIoU", "mAcc", "ΔmIoU", "ΔmAcc");
    for r in rows {
        out.push_str(&format!("{:<20} {:>8.4} {:>8.4} {:>+10.4} {:>+10.4}\n", r.model_name, r.miou, r.macc, r.miou_delta, r.macc_delta));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize, v: &[u8]) -> LabelMask {
        Grid::new(w, h, v.to_vec()).unwrap()
    }

    fn report(name: &str, miou: f64, macc: f64) -> MetricReport {
        MetricReport { model_name: name.into(), pixel_total: 0, per_class: vec![], miou, macc }
    }

    #[test]
    fn perfect_and_empty() {
        let mut cm = ConfusionMatrix::new(3);
        let m = grid(2, 2, &[1; 4]);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.get(1, 1), 4);
        assert_eq!(cm.miou(true).unwrap(), 1.0);
        assert_eq!(cm.macc(true).unwrap(), 1.0);
        let before = cm.clone();
        cm.accumulate(&Grid::new(0, 0, vec![]).unwrap(), &Grid::new(0, 0, vec![]).unwrap()).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(ConfusionMatrix::new(3).miou(true), Err(MetricsError::DegenerateEvaluation)));
        assert!(matches!(cm.accumulate(&grid(2, 1, &[0, 0]), &m), Err(MetricsError::Geometry { .. })));
    }

    #[test]
    fn hand_iou_case() {
        // gt: 8 pixels of class 1; prediction covers 4 of them plus 2 extra
        let gt = grid(4, 4, &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pred = grid(4, 4, &[1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert!((cm.iou_per_class(true)[&1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_mislabeled_classes_score_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&grid(2, 1, &[2, 1]), &grid(2, 1, &[1, 2])).unwrap();
        let iou = cm.iou_per_class(true);
        assert_eq!(iou[&1], 0.0);
        assert_eq!(iou[&2], 0.0);
        assert!(!iou.contains_key(&0));
        assert_eq!(cm.macc(true).unwrap(), 0.0);
    }

    #[test]
    fn iou_mean_of_one_and_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&grid(3, 1, &[1, 2, 0]), &grid(3, 1, &[1, 0, 0])).unwrap();
        // class 0: tp 1, fn 1 → 0.5; class 1: 1.0; class 2: 0.0
        assert!((cm.miou(true).unwrap() - 0.5).abs() < 1e-15);
        assert!((cm.miou(false).unwrap() - 0.5).abs() < 1e-15);
    }

    fn brute(pred: &[u8], gt: &[u8], classes: usize) -> (f64, f64) {
        let mut ious = vec![];
        let mut accs = vec![];
        for c in 0..classes as u8 {
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            let n = gt.iter().filter(|g| **g == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
            if n > 0 {
                accs.push(inter as f64 / n as f64);
            }
        }
        (ious.iter().sum::<f64>() / ious.len() as f64, accs.iter().sum::<f64>() / accs.len() as f64)
    }

    #[test]
    fn random_maps_match_pixel_oracle_and_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pairs: Vec<(Vec<u8>, Vec<u8>)> =
                (0..3).map(|_| ((0..9).map(|_| rng.gen_range(0..3)).collect(), (0..9).map(|_| rng.gen_range(0..3)).collect())).collect();
            let mut cm = ConfusionMatrix::new(3);
            for (p, g) in &pairs {
                cm.accumulate(&grid(3, 3, p), &grid(3, 3, g)).unwrap();
            }
            let mut rev = ConfusionMatrix::new(3);
            for (p, g) in pairs.iter().rev() {
                rev.accumulate(&grid(3, 3, p), &grid(3, 3, g)).unwrap();
            }
            assert_eq!(cm, rev);
            let all_p: Vec<u8> = pairs.iter().flat_map(|(p, _)| p.clone()).collect();
            let all_g: Vec<u8> = pairs.iter().flat_map(|(_, g)| g.clone()).collect();
            for gt in 0..3 {
                for pr in 0..3 {
                    let n = all_p.iter().zip(&all_g).filter(|(p, g)| **p == pr as u8 && **g == gt as u8).count();
                    assert_eq!(cm.get(gt, pr), n as u64);
                }
            }
            let (mi, ma) = brute(&all_p, &all_g, 3);
            assert!((cm.miou(true).unwrap() - mi).abs() < 1e-12);
            assert!((cm.macc(true).unwrap() - ma).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_orders_and_deltas() {
        let reports = [report("Segformer", 0.32, 0.15), report("Radious", 0.65, 0.90), report("Deeplabv3+", 0.56, 0.70)];
        let rows = compare_reports(&reports).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.model_name.as_str()).collect();
        assert_eq!(names, ["Radious", "Deeplabv3+", "Segformer"]);
        assert!((rows[1].miou_delta + 0.09).abs() < 1e-9);
        assert!((rows[2].miou_delta + 0.33).abs() < 1e-9);
        assert_eq!(rows[0].miou_delta, 0.0);

        let twins = compare_reports(&[report("a", 0.5, 0.5), report("b", 0.5, 0.5)]).unwrap();
        assert_eq!(twins[1].miou_delta, 0.0);
        assert!(matches!(compare_reports(&[report("a", 0.1, 0.1), report("a", 0.2, 0.2)]), Err(MetricsError::Naming(_))));
        assert!(matches!(compare_reports(&reports[..1]), Err(MetricsError::TooFewReports(1))));
    }

    #[test]
    fn deltas_from_hand_built_matrices() {
        let gt = grid(4, 1, &[1, 1, 0, 0]);
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&grid(4, 1, &[1, 1, 0, 0]), &gt).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&grid(4, 1, &[1, 0, 0, 0]), &gt).unwrap();
        let ra = a.report("a", None, true).unwrap();
        let rb = b.report("b", None, true).unwrap();
        let rows = compare_reports(&[rb.clone(), ra.clone()]).unwrap();
        assert_eq!(rows[0].model_name, "a");
        assert_eq!(rows[1].miou_delta, rb.miou - ra.miou);
        assert_eq!(rows[1].macc_delta, rb.macc - ra.macc);
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&grid(3, 1, &[1, 2, 0]), &grid(3, 1, &[1, 1, 0])).unwrap();
        let palette = ClassPalette::from_names(&["a", "b"]);
        let r = cm.report("m", Some(&palette), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        r.save(&path).unwrap();
        assert_eq!(MetricReport::load(&path).unwrap(), r);
        assert_eq!(r.per_class.len(), 3);
        assert_eq!(r.per_class[1].name, "a");
    }
}
