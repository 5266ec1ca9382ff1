//! Query-based mask decoder: a top-down pixel decoder and a stack of
//! masked-attention transformer layers that read one feature scale per layer.

mod matching;
mod inference;

pub use inference::semantic_inference;
pub use matching::{hungarian, hungarian_match, match_costs, training_loss, GtSegment, LossBreakdown};

use serde::{Deserialize, Serialize};

use crate::backbone::MultiScaleFeatures;
use crate::nn::{map_to_tokens, Attention, Binding, Conv2d, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::numkit::{sigmoid, Graph, Tensor, Var};
use crate::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_queries: usize,
    /// Transformer layers; a multiple of the number of feature scales.
    pub num_layers: usize,
    /// Foreground classes; logits carry one more column for "no object".
    pub num_classes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask_threshold: f64,
    /// Pixels whose best class score falls below this become background.
    pub background_floor: f64,
    pub class_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub no_object_weight: f64,
    /// When false the cross-attention ignores the predicted masks.
    pub masked_attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            num_layers: 3,
            num_classes: 33,
            heads: 4,
            ffn_dim: 128,
            mask_threshold: 0.5,
            background_floor: 0.25,
            class_weight: 2.0,
            bce_weight: 5.0,
            dice_weight: 5.0,
            no_object_weight: 0.1,
            masked_attention: true,
        }
    }
}

impl DecoderConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    /// 100 queries, three rounds over the three scales.
    pub fn full() -> Self {
        Self { num_queries: 100, num_layers: 9, heads: 8, ffn_dim: 1024, ..Self::default() }
    }

    pub fn validate(&self, embed_dim: usize, num_scales: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if num_scales == 0 || self.num_layers % num_scales != 0 {
            return bad(format!("num_layers {} must be a multiple of the {num_scales} feature scales", self.num_layers));
        }
        if self.heads == 0 || embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {embed_dim} not divisible by decoder heads {}", self.heads));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_threshold) || !(0.0..=1.0).contains(&self.background_floor) {
            return bad("mask_threshold and background_floor must lie in [0, 1)".into());
        }
        if [self.class_weight, self.bce_weight, self.dice_weight, self.no_object_weight].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Predictions after one decoder stage.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationOutput {
    /// `N_q × (C+1)`, last column "no object".
    pub class_logits: Var,
    /// `N_q × H/4 × W/4`.
    pub mask_logits: Var,
}

pub struct PixelOutput {
    /// `D × H/4 × W/4`.
    pub per_pixel: Var,
    /// Top-down maps, one per input scale, finest first.
    pub memory: Vec<Var>,
}

pub struct DecoderOutput {
    /// Initial prediction followed by one per layer.
    pub outputs: Vec<SegmentationOutput>,
    /// Row-major `N_q × M` attend-allowed mask used by each layer, before the
    /// all-false row rescue; `None` when masked attention is disabled.
    pub attn_masks: Vec<Option<Vec<bool>>>,
    /// Memory scale index (finest first) read by each layer.
    pub layer_scales: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub laterals: Vec<Conv2d>,
    pub outputs: Vec<Conv2d>,
    pub stem_lateral: Conv2d,
    pub mask_features: Conv2d,
}

impl PixelDecoder {
    fn new(store: &mut ParamStore, init: &mut Init, dim: usize, num_scales: usize) -> Self {
        let laterals = (0..num_scales).map(|i| Conv2d::new(store, init, &format!("decoder.pixel.lateral{i}"), dim, dim, 1, 1)).collect();
        let outputs = (0..num_scales).map(|i| Conv2d::new(store, init, &format!("decoder.pixel.output{i}"), dim, dim, 3, 1)).collect();
        Self {
            laterals,
            outputs,
            stem_lateral: Conv2d::new(store, init, "decoder.pixel.lateral_stem", dim, dim, 1, 1),
            mask_features: Conv2d::new(store, init, "decoder.pixel.mask_features", dim, dim, 1, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, ms: &MultiScaleFeatures) -> Result<PixelOutput, ModelError> {
        let n = ms.maps.len();
        let mut memory = vec![None; n];
        let mut above: Option<Var> = None;
        for i in (0..n).rev() {
            let mut x = self.laterals[i].forward(g, b, ms.maps[i])?;
            if let Some(up) = above {
                let (h, w) = ms.extents[i];
                let up = g.bilinear_resize(up, h, w)?;
                x = g.add(x, up)?;
            }
            let y = self.outputs[i].forward(g, b, x)?;
            let y = g.relu(y);
            memory[i] = Some(y);
            above = Some(y);
        }
        let stem = self.stem_lateral.forward(g, b, ms.stem)?;
        let (h, w) = (g.shape(stem)[1], g.shape(stem)[2]);
        let up = g.bilinear_resize(above.expect("at least one scale"), h, w)?;
        let x = g.add(stem, up)?;
        let per_pixel = self.mask_features.forward(g, b, x)?;
        Ok(PixelOutput { per_pixel, memory: memory.into_iter().map(Option::unwrap).collect() })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross_attn: Attention,
    pub cross_norm: LayerNorm,
    pub self_attn: Attention,
    pub self_norm: LayerNorm,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
}

/// 2-D sinusoidal position code, `h·w × d`: the first half of the channels
/// encodes the row, the second half the column.
pub fn sine_position(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..][..d];
            for (offset, pos, n) in [(0, y, half), (half, x, d - half)] {
                for i in 0..n {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / n as f64);
                    let a = (pos as f64 + 0.5) / freq;
                    row[offset + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
        }
    }
    Tensor::new(&[h * w, d], data).expect("consistent size")
}

/// Thresholded attend-allowed mask: `sigmoid(resize(logits)) > threshold`.
pub fn attention_mask(mask_logits: &Tensor, h: usize, w: usize, threshold: f64) -> Result<Vec<bool>, ModelError> {
    let resized = mask_logits.bilinear_resize(h, w)?;
    Ok(resized.data().iter().map(|&v| sigmoid(v) > threshold).collect())
}

/// Cross-attention from queries to memory tokens restricted by `allowed`.
pub fn masked_attention(
    g: &mut Graph,
    b: &Binding,
    attn: &Attention,
    queries: Var,
    keys: Var,
    values: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Vec<Var>), ModelError> {
    let out = attn.forward(g, b, queries, keys, values, allowed)?;
    Ok((out.out, out.weights))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub dim: usize,
    pub num_scales: usize,
    pub pixel: PixelDecoder,
    pub query_feat: ParamId,
    pub query_pos: ParamId,
    pub level_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub class_head: Linear,
    pub mask_embed: [Linear; 3],
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &DecoderConfig, dim: usize, num_scales: usize) -> Result<Self, ModelError> {
        cfg.validate(dim, num_scales)?;
        let pixel = PixelDecoder::new(store, init, dim, num_scales);
        let nq = cfg.num_queries;
        let query_feat = store.add("decoder.query_feat", init.uniform(&[nq, dim], 1.0));
        let query_pos = store.add("decoder.query_pos", init.uniform(&[nq, dim], 1.0));
        let level_embed = store.add("decoder.level_embed", init.uniform(&[num_scales, dim], 0.1));
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let name = format!("decoder.layers.{i}");
                DecoderLayer {
                    cross_attn: Attention::new(store, init, &format!("{name}.cross_attn"), dim, cfg.heads),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
                    self_attn: Attention::new(store, init, &format!("{name}.self_attn"), dim, cfg.heads),
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
                    ffn: Mlp::new(store, init, &format!("{name}.ffn"), dim, cfg.ffn_dim),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(store, "decoder.out_norm", dim);
        let class_head = Linear::new(store, init, "decoder.class_head", dim, cfg.num_classes + 1);
        let mask_embed = [0, 1, 2].map(|i| Linear::new(store, init, &format!("decoder.mask_embed.{i}"), dim, dim));
        Ok(Self { cfg: cfg.clone(), dim, num_scales, pixel, query_feat, query_pos, level_embed, layers, out_norm, class_head, mask_embed })
    }

    pub fn pixel_decode(&self, g: &mut Graph, b: &Binding, ms: &MultiScaleFeatures) -> Result<PixelOutput, ModelError> {
        if ms.maps.len() != self.num_scales {
            return Err(ModelError::Geometry(format!("decoder expects {} scales, got {}", self.num_scales, ms.maps.len())));
        }
        self.pixel.forward(g, b, ms)
    }

    /// Class logits and per-pixel mask logits for the current queries.
    pub fn predict(&self, g: &mut Graph, b: &Binding, queries: Var, per_pixel: Var) -> Result<SegmentationOutput, ModelError> {
        let h = self.out_norm.forward(g, b, queries)?;
        let class_logits = self.class_head.forward(g, b, h)?;
        let mut e = h;
        for (i, lin) in self.mask_embed.iter().enumerate() {
            e = lin.forward(g, b, e)?;
            if i + 1 < self.mask_embed.len() {
                e = g.relu(e);
            }
        }
        let shape = g.shape(per_pixel).to_vec();
        let flat = g.reshape(per_pixel, &[shape[0], shape[1] * shape[2]])?;
        let m = g.matmul(e, flat)?;
        let mask_logits = g.reshape(m, &[self.cfg.num_queries, shape[1], shape[2]])?;
        Ok(SegmentationOutput { class_logits, mask_logits })
    }

    /// Memory scale (finest-first index) read by layer `layer`: coarsest first.
    pub fn scale_for_layer(&self, layer: usize) -> usize {
        self.num_scales - 1 - layer % self.num_scales
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, px: &PixelOutput) -> Result<DecoderOutput, ModelError> {
        self.forward_with_masks(g, b, px, None)
    }

    /// Like [`Decoder::forward`], but with the per-layer attention masks taken
    /// from `fixed` instead of the previous predictions. The masks carry no
    /// gradient either way, so finite-difference checks pin them to avoid
    /// threshold crossings.
    pub fn forward_with_masks(
        &self,
        g: &mut Graph,
        b: &Binding,
        px: &PixelOutput,
        fixed: Option<&[Option<Vec<bool>>]>,
    ) -> Result<DecoderOutput, ModelError> {
        if let Some(f) = fixed {
            if f.len() != self.layers.len() {
                return Err(ModelError::Config(format!("{} fixed masks for {} decoder layers", f.len(), self.layers.len())));
            }
        }
        let mut memory_tokens = Vec::with_capacity(px.memory.len());
        for (i, &m) in px.memory.iter().enumerate() {
            let (h, w) = (g.shape(m)[1], g.shape(m)[2]);
            let tokens = map_to_tokens(g, m)?;
            let level = g.slice_rows(b.var(self.level_embed), i, i + 1)?;
            let values = g.add_row(tokens, level)?;
            let pos = g.constant(sine_position(h, w, self.dim));
            let keys = g.add(values, pos)?;
            memory_tokens.push((keys, values, (h, w)));
        }

        let qpos = b.var(self.query_pos);
        let mut q = b.var(self.query_feat);
        let mut outputs = vec![self.predict(g, b, q, px.per_pixel)?];
        let mut attn_masks = Vec::with_capacity(self.layers.len());
        let mut layer_scales = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let s = self.scale_for_layer(l);
            let (keys, values, (h, w)) = memory_tokens[s];
            let allowed = if let Some(f) = fixed {
                f[l].clone()
            } else if self.cfg.masked_attention {
                let prev = g.value(outputs[l].mask_logits);
                Some(attention_mask(prev, h, w, self.cfg.mask_threshold)?)
            } else {
                None
            };
            let qin = g.add(q, qpos)?;
            let (a, _) = masked_attention(g, b, &layer.cross_attn, qin, keys, values, allowed.as_deref())?;
            let x = g.add(q, a)?;
            q = layer.cross_norm.forward(g, b, x)?;

            let qin = g.add(q, qpos)?;
            let a = layer.self_attn.forward(g, b, qin, qin, q, None)?;
            let x = g.add(q, a.out)?;
            q = layer.self_norm.forward(g, b, x)?;

            let f = layer.ffn.forward(g, b, q)?;
            let x = g.add(q, f)?;
            q = layer.ffn_norm.forward(g, b, x)?;

            outputs.push(self.predict(g, b, q, px.per_pixel)?);
            attn_masks.push(allowed);
            layer_scales.push(s);
        }
        Ok(DecoderOutput { outputs, attn_masks, layer_scales })
    }
}
