use std::rc::Rc;

use super::{DecoderConfig, SegmentationOutput};
use crate::datakit::LabelMask;
use crate::numkit::{dice_terms, softplus, Graph, Tensor, Var};
use crate::ModelError;

/// One ground-truth segment at decoder output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSegment {
    /// Palette id, at least 1.
    pub class_id: u8,
    /// Row-major binary mask of `h·w` values.
    pub mask: Rc<Vec<f64>>,
}

impl GtSegment {
    /// Splits a label mask, resized to `width × height` with nearest
    /// neighbor, into one segment per foreground id present.
    pub fn from_label_mask(mask: &LabelMask, width: usize, height: usize) -> Vec<GtSegment> {
        let small = mask.resize_nearest(width, height);
        small
            .distinct()
            .into_iter()
            .filter(|&c| c != 0)
            .map(|c| GtSegment {
                class_id: c,
                mask: Rc::new(small.data().iter().map(|&v| f64::from(v == c)).collect()),
            })
            .collect()
    }
}

/// Per-term losses of [`training_loss`], summed over decoder stages.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

/// `N_q × G` matching cost `−λ_cls·p_q(class) + λ_bce·BCE + λ_dice·Dice`.
pub fn match_costs(class_logits: &Tensor, mask_logits: &Tensor, gt: &[GtSegment], cfg: &DecoderConfig) -> Result<Vec<Vec<f64>>, ModelError> {
    let probs = class_logits.softmax(1)?;
    let (nq, k) = (class_logits.shape()[0], class_logits.shape()[1]);
    let hw = mask_logits.numel() / nq.max(1);
    let mut costs = vec![vec![0.0; gt.len()]; nq];
    for (gi, seg) in gt.iter().enumerate() {
        let col = seg.class_id as usize - 1;
        if seg.mask.len() != hw || col + 1 >= k {
            return Err(ModelError::Geometry(format!(
                "segment of class {} with {} pixels does not fit {} classes at {hw} pixels",
                seg.class_id,
                seg.mask.len(),
                k - 1
            )));
        }
        for (q, row) in costs.iter_mut().enumerate() {
            let logits = &mask_logits.data()[q * hw..(q + 1) * hw];
            let bce = logits.iter().zip(seg.mask.iter()).map(|(&x, &t)| softplus(x) - x * t).sum::<f64>() / hw as f64;
            let (num, den) = dice_terms(logits, &seg.mask);
            row[gi] = -cfg.class_weight * probs.data()[q * k + col] + cfg.bce_weight * bce + cfg.dice_weight * (1.0 - num / den);
        }
    }
    Ok(costs)
}

/// Minimum-cost assignment of each row to a distinct column (rows ≤ columns),
/// by shortest augmenting paths with dual potentials. Returns the column of
/// every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "{n} rows cannot be matched into {m} columns");
    let big = 1e100;
    let c = |i: usize, j: usize| {
        let v = cost[i][j];
        if v.is_finite() {
            v
        } else {
            big
        }
    };
    // 1-based potentials; p[j] is the row matched to column j, 0 for none
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal `(query, segment index)` pairs, sorted by query.
pub fn hungarian_match(class_logits: &Tensor, mask_logits: &Tensor, gt: &[GtSegment], cfg: &DecoderConfig) -> Result<Vec<(usize, usize)>, ModelError> {
    let nq = class_logits.shape()[0];
    if gt.len() > nq {
        return Err(ModelError::Capacity { segments: gt.len(), queries: nq });
    }
    if gt.is_empty() {
        return Ok(Vec::new());
    }
    let costs = match_costs(class_logits, mask_logits, gt, cfg)?;
    // transpose so segments are rows
    let by_segment: Vec<Vec<f64>> = (0..gt.len()).map(|gi| costs.iter().map(|row| row[gi]).collect()).collect();
    let mut pairs: Vec<(usize, usize)> = hungarian(&by_segment).into_iter().enumerate().map(|(gi, q)| (q, gi)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Deeply supervised set loss over every decoder stage.
pub fn training_loss(g: &mut Graph, outputs: &[SegmentationOutput], gt: &[GtSegment], cfg: &DecoderConfig) -> Result<(Var, LossBreakdown), ModelError> {
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut parts = LossBreakdown::default();
    for out in outputs {
        let class_logits = g.value(out.class_logits).clone();
        let mask_logits = g.value(out.mask_logits).clone();
        let pairs = hungarian_match(&class_logits, &mask_logits, gt, cfg)?;
        let (nq, k) = (class_logits.shape()[0], class_logits.shape()[1]);

        let mut targets = vec![k - 1; nq];
        let mut weights = vec![cfg.no_object_weight; nq];
        for &(q, gi) in &pairs {
            targets[q] = gt[gi].class_id as usize - 1;
            weights[q] = 1.0;
        }
        if weights.iter().sum::<f64>() > 0.0 {
            let ce = g.cross_entropy(out.class_logits, &targets, &weights)?;
            parts.class += g.value(ce).item();
            let term = g.scale(ce, cfg.class_weight);
            total = g.add(total, term)?;
        }
        if pairs.is_empty() {
            continue;
        }
        let hw = mask_logits.numel() / nq;
        let flat = g.reshape(out.mask_logits, &[nq, hw])?;
        let queries: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let rows = g.gather_rows(flat, &queries)?;
        let t: Rc<Vec<f64>> = Rc::new(pairs.iter().flat_map(|&(_, gi)| gt[gi].mask.iter().copied()).collect());
        let bce = g.bce_with_logits(rows, Rc::clone(&t))?;
        let dice = g.dice_loss(rows, t)?;
        parts.bce += g.value(bce).item();
        parts.dice += g.value(dice).item();
        let bce = g.scale(bce, cfg.bce_weight);
        let dice = g.scale(dice, cfg.dice_weight);
        total = g.add(total, bce)?;
        total = g.add(total, dice)?;
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::Grid;
    use crate::numkit::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }

    #[test]
    fn hungarian_hand_case() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let cols = hungarian(&cost);
        assert_eq!(assignment_cost(&cost, &cols), 5.0);
        assert!(hungarian(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(rows in 1usize..=6, extra in 0usize..=2, seed in any::<u64>()) {
            let cols = (rows + extra).min(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let got = hungarian(&cost);
            let mut seen = got.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), rows);
            prop_assert!((assignment_cost(&cost, &got) - brute_force(&cost)).abs() < 1e-9);
        }
    }

    fn saturated(nq: usize, k: usize, hw: usize, gt: &[(usize, usize, Vec<f64>)]) -> (Tensor, Tensor) {
        // gt entries: (query, class column, mask)
        let mut cls = vec![0.0; nq * k];
        let mut masks = vec![-60.0; nq * hw];
        for q in 0..nq {
            cls[q * k + k - 1] = 60.0;
        }
        for (q, c, m) in gt {
            cls[q * k + k - 1] = 0.0;
            cls[q * k + c] = 60.0;
            for (j, &t) in m.iter().enumerate() {
                masks[q * hw + j] = if t > 0.5 { 60.0 } else { -60.0 };
            }
        }
        (Tensor::new(&[nq, k], cls).unwrap(), Tensor::new(&[nq, hw], masks).unwrap())
    }

    #[test]
    fn dominant_query_is_assigned() {
        let mask = vec![1.0, 0.0, 1.0, 1.0];
        let (cls, masks) = saturated(5, 4, 4, &[(3, 1, mask.clone())]);
        let gt = [GtSegment { class_id: 2, mask: Rc::new(mask) }];
        let cfg = DecoderConfig::desk(3);
        assert_eq!(hungarian_match(&cls, &masks, &gt, &cfg).unwrap(), vec![(3, 0)]);
        assert!(hungarian_match(&cls, &masks, &[], &cfg).unwrap().is_empty());
        let many = vec![gt[0].clone(); 6];
        assert!(matches!(hungarian_match(&cls, &masks, &many, &cfg), Err(ModelError::Capacity { segments: 6, queries: 5 })));
    }

    #[test]
    fn match_equals_brute_force_on_random_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DecoderConfig::desk(3);
        for _ in 0..20 {
            let cls = Tensor::new(&[5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let masks = Tensor::new(&[5, 2, 3], (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let gt: Vec<GtSegment> = (0..4)
                .map(|_| GtSegment { class_id: rng.gen_range(1..=3), mask: Rc::new((0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect()) })
                .collect();
            let pairs = hungarian_match(&cls, &masks, &gt, &cfg).unwrap();
            let costs = match_costs(&cls, &masks, &gt, &cfg).unwrap();
            let by_seg: Vec<Vec<f64>> = (0..4).map(|gi| costs.iter().map(|r| r[gi]).collect()).collect();
            let got: f64 = pairs.iter().map(|&(q, gi)| costs[q][gi]).sum();
            assert!((got - brute_force(&by_seg)).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let m1 = vec![1.0, 1.0, 0.0, 0.0];
        let m2 = vec![0.0, 0.0, 1.0, 0.0];
        let (cls, masks) = saturated(4, 4, 4, &[(0, 2, m1.clone()), (2, 0, m2.clone())]);
        let gt = [GtSegment { class_id: 3, mask: Rc::new(m1) }, GtSegment { class_id: 1, mask: Rc::new(m2) }];
        let mut g = Graph::new();
        let c = g.param(cls);
        let m = g.param(masks.reshape(&[4, 2, 2]).unwrap());
        let out = SegmentationOutput { class_logits: c, mask_logits: m };
        let (loss, parts) = training_loss(&mut g, &[out, out], &gt, &DecoderConfig::desk(3)).unwrap();
        assert!(g.value(loss).item().abs() < 1e-6, "{parts:?}");
    }

    #[test]
    fn loss_is_nonnegative_and_mask_terms_vanish_only_on_exact_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DecoderConfig::desk(2);
        for _ in 0..20 {
            let mut g = Graph::new();
            let c = g.param(Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap());
            let m = g.param(Tensor::new(&[3, 2, 2], (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap());
            let gt = [GtSegment { class_id: 2, mask: Rc::new(vec![1.0, 0.0, 0.0, 1.0]) }];
            let (loss, parts) = training_loss(&mut g, &[SegmentationOutput { class_logits: c, mask_logits: m }], &gt, &cfg).unwrap();
            assert!(g.value(loss).item() >= 0.0);
            assert!(parts.bce > 1e-6 && parts.dice > 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_two_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cls = Tensor::new(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let masks = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let gt = vec![GtSegment { class_id: 1, mask: Rc::new(vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]) }];
        let cfg = DecoderConfig::desk(2);
        let err = max_relative_error(&[cls, masks], |g, v| {
            let out = SegmentationOutput { class_logits: v[0], mask_logits: v[1] };
            training_loss(g, &[out], &gt, &cfg).unwrap().0
        });
        assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn segments_from_label_mask() {
        let mask = Grid::from_fn(8, 8, |x, y| if x < 4 && y < 4 { 3 } else if x >= 4 { 1 } else { 0 });
        let segs = GtSegment::from_label_mask(&mask, 2, 2);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].class_id, 1);
        assert_eq!(*segs[0].mask, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(*segs[1].mask, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
