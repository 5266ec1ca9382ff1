use crate::datakit::{Grid, LabelMask};
use crate::numkit::{sigmoid, Tensor};
use crate::ModelError;

/// Per-pixel class map from one decoder stage.
///
/// `score(c, x) = Σ_q p_q(c)·σ(m_q(x))` over foreground classes; the argmax
/// wins unless its score is below `floor`, in which case the pixel is
/// background. Labels are computed at mask resolution and resized with
/// nearest neighbor to `full_w × full_h`.
pub fn semantic_inference(class_logits: &Tensor, mask_logits: &Tensor, floor: f64, full_h: usize, full_w: usize) -> Result<LabelMask, ModelError> {
    let (nq, k) = match class_logits.shape() {
        &[n, k] if k >= 2 => (n, k),
        s => return Err(ModelError::Geometry(format!("class logits must be N×(C+1) with C ≥ 1, got {s:?}"))),
    };
    let (h, w) = match mask_logits.shape() {
        &[n, h, w] if n == nq => (h, w),
        s => return Err(ModelError::Geometry(format!("mask logits {s:?} do not match {nq} queries"))),
    };
    if k - 1 > 255 {
        return Err(ModelError::Geometry(format!("{} classes exceed 8-bit labels", k - 1)));
    }
    let probs = class_logits.softmax(1)?;
    let hw = h * w;
    let mut scores = vec![0.0; (k - 1) * hw];
    for q in 0..nq {
        let p = &probs.data()[q * k..q * k + k - 1];
        let m = &mask_logits.data()[q * hw..(q + 1) * hw];
        let s: Vec<f64> = m.iter().map(|&v| sigmoid(v)).collect();
        for (c, &pc) in p.iter().enumerate() {
            for (acc, &sv) in scores[c * hw..(c + 1) * hw].iter_mut().zip(&s) {
                *acc += pc * sv;
            }
        }
    }
    let labels = Grid::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..k - 1 {
            let v = scores[c * hw + i];
            if v > best.1 {
                best = (c, v);
            }
        }
        if best.1 < floor {
            0
        } else {
            (best.0 + 1) as u8
        }
    });
    Ok(labels.resize_nearest(full_w, full_h))
}
