//! Plain vision transformer wrapped by a convolutional spatial prior module,
//! cross-attention injectors and multi-scale extractors.

mod config;
pub mod mim;

pub use config::{evenly_spaced_points, BackboneConfig};

use crate::nn::{map_to_tokens, tokens_to_map, Attention, Binding, Conv2d, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::numkit::{Graph, Tensor, Var};
use crate::ModelError;

/// One feature map per configured reduction plus the stride-4 stem map.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    /// `D × H/4 × W/4`; consumed only as the pixel decoder's finest lateral.
    pub stem: Var,
    /// `D × ⌈H/r⌉ × ⌈W/r⌉` for each reduction `r`, finest first.
    pub maps: Vec<Var>,
    /// (height, width) of each entry of `maps`.
    pub extents: Vec<(usize, usize)>,
}

impl MultiScaleFeatures {
    pub fn token_count(&self) -> usize {
        self.extents.iter().map(|(h, w)| h * w).sum()
    }
}

/// Extracts non-overlapping `p×p` patches of a `1×H×W` image as rows.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor, ModelError> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(ModelError::Geometry(format!("expected a 1×H×W image, got {s:?}"))),
    };
    if c != 1 {
        return Err(ModelError::Geometry(format!("expected a single-channel image, got {c} channels")));
    }
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(ModelError::Geometry(format!("image extent {h}×{w} is not divisible by patch size {p}; resize the input first")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut rows = Vec::with_capacity(h * w);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                rows.extend_from_slice(&src[(py * p + y) * w + px * p..][..p]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, p * p], rows)?)
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, init, &format!("{name}.attn"), d, cfg.heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), d, d * cfg.mlp_ratio),
        }
    }

    /// Returns the new state and this block's attention weight matrices.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<(Var, Vec<Var>), ModelError> {
        let h = self.norm1.forward(g, b, x)?;
        let a = self.attn.forward(g, b, h, h, h, None)?;
        let x = g.add(x, a.out)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = self.mlp.forward(g, b, h)?;
        Ok((g.add(x, h)?, a.weights))
    }
}

/// Strided convolutional stem emitting local multi-scale priors.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// One strided conv per reduction after the stem.
    pub downs: Vec<Conv2d>,
    pub proj_stem: Conv2d,
    pub projs: Vec<Conv2d>,
}

impl SpatialPrior {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) -> Self {
        let c = cfg.stem_channels;
        let d = cfg.embed_dim;
        let conv1 = Conv2d::new(store, init, "backbone.spm.conv1", 1, c, 3, 2);
        let conv2 = Conv2d::new(store, init, "backbone.spm.conv2", c, 2 * c, 3, 2);
        let mut downs = Vec::new();
        let mut projs = Vec::new();
        let mut ch = 2 * c;
        for (i, r) in cfg.scales.iter().enumerate() {
            downs.push(Conv2d::new(store, init, &format!("backbone.spm.down{r}"), ch, 4 * c, 3, 2));
            ch = 4 * c;
            projs.push(Conv2d::new(store, init, &format!("backbone.spm.proj{i}"), ch, d, 1, 1));
        }
        let proj_stem = Conv2d::new(store, init, "backbone.spm.proj_stem", 2 * c, d, 1, 1);
        Self { conv1, conv2, downs, proj_stem, projs }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, image: Var) -> Result<MultiScaleFeatures, ModelError> {
        let x = self.conv1.forward(g, b, image)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, b, x)?;
        let mut x = g.relu(x);
        let stem = self.proj_stem.forward(g, b, x)?;
        let mut maps = Vec::with_capacity(self.downs.len());
        let mut extents = Vec::with_capacity(self.downs.len());
        for (down, proj) in self.downs.iter().zip(&self.projs) {
            let y = down.forward(g, b, x)?;
            x = g.relu(y);
            let m = proj.forward(g, b, x)?;
            extents.push((g.shape(m)[1], g.shape(m)[2]));
            maps.push(m);
        }
        Ok(MultiScaleFeatures { stem, maps, extents })
    }
}

/// Gated cross-attention from transformer tokens (queries) to prior features.
#[derive(Clone, Debug)]
pub struct Injector {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: Attention,
    /// Scalar gate, zero at initialization.
    pub gate: ParamId,
}

/// Cross-attention from prior features (queries) to transformer tokens.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: Attention,
}

fn flatten_priors(g: &mut Graph, priors: &MultiScaleFeatures) -> Result<Var, ModelError> {
    let mut toks = Vec::with_capacity(priors.maps.len());
    for &m in &priors.maps {
        toks.push(map_to_tokens(g, m)?);
    }
    Ok(g.concat(&toks)?)
}

impl Injector {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), d),
            feat_norm: LayerNorm::new(store, &format!("{name}.feat_norm"), d),
            attn: Attention::new(store, init, &format!("{name}.attn"), d, cfg.adapter_heads),
            gate: store.add(format!("{name}.gate"), Tensor::zeros(&[1])),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, tokens: Var, priors: &MultiScaleFeatures) -> Result<Var, ModelError> {
        let feats = flatten_priors(g, priors)?;
        let q = self.query_norm.forward(g, b, tokens)?;
        let f = self.feat_norm.forward(g, b, feats)?;
        let a = self.attn.forward(g, b, q, f, f, None)?;
        let gated = g.mul_scalar(a.out, b.var(self.gate))?;
        Ok(g.add(tokens, gated)?)
    }
}

impl Extractor {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), d),
            feat_norm: LayerNorm::new(store, &format!("{name}.feat_norm"), d),
            attn: Attention::new(store, init, &format!("{name}.attn"), d, cfg.adapter_heads),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, tokens: Var, priors: &MultiScaleFeatures) -> Result<MultiScaleFeatures, ModelError> {
        let flat = flatten_priors(g, priors)?;
        let q = self.query_norm.forward(g, b, flat)?;
        let f = self.feat_norm.forward(g, b, tokens)?;
        let a = self.attn.forward(g, b, q, f, f, None)?;
        let updated = g.add(flat, a.out)?;
        let mut maps = Vec::with_capacity(priors.maps.len());
        let mut start = 0;
        for &(h, w) in &priors.extents {
            let rows = g.slice_rows(updated, start, start + h * w)?;
            maps.push(tokens_to_map(g, rows, h, w)?);
            start += h * w;
        }
        Ok(MultiScaleFeatures { stem: priors.stem, maps, extents: priors.extents.clone() })
    }
}

/// Everything recorded by one backbone pass.
pub struct BackboneOutput {
    pub features: MultiScaleFeatures,
    /// Priors straight out of the spatial prior module.
    pub priors: MultiScaleFeatures,
    /// Token state after every transformer block.
    pub block_states: Vec<Var>,
    /// Attention weights of every transformer block, per head.
    pub block_attention: Vec<Vec<Var>>,
    /// Injector outputs, one per interaction point.
    pub injected: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_proj: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub spm: SpatialPrior,
    pub injectors: Vec<Injector>,
    pub extractors: Vec<Extractor>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch_proj = Linear::new(store, init, "backbone.patch_embed", p * p, d);
        let (gh, gw) = cfg.pos_grid();
        let pos_embed = store.add("backbone.pos_embed", init.uniform(&[gh * gw, d], 0.02));
        let blocks = (0..cfg.depth).map(|i| Block::new(store, init, &format!("backbone.blocks.{i}"), cfg)).collect();
        let spm = SpatialPrior::new(store, init, cfg);
        let n = cfg.interaction_points.len();
        let injectors = (0..n).map(|i| Injector::new(store, init, &format!("backbone.adapter.{i}.inject"), cfg)).collect();
        let extractors = (0..n).map(|i| Extractor::new(store, init, &format!("backbone.adapter.{i}.extract"), cfg)).collect();
        Ok(Self { cfg: cfg.clone(), patch_proj, pos_embed, blocks, spm, injectors, extractors })
    }

    /// Linear projection of flattened patches, without positions.
    pub fn project_patches(&self, g: &mut Graph, b: &Binding, image: &Tensor) -> Result<(Var, (usize, usize)), ModelError> {
        let p = self.cfg.patch_size;
        let patches = patchify(image, p)?;
        let grid = (image.shape()[1] / p, image.shape()[2] / p);
        let x = g.constant(patches);
        Ok((self.patch_proj.forward(g, b, x)?, grid))
    }

    /// Adds learned positional embeddings, interpolated when the token grid
    /// differs from the configured one.
    pub fn add_positions(&self, g: &mut Graph, b: &Binding, tokens: Var, grid: (usize, usize)) -> Result<Var, ModelError> {
        let (gh, gw) = self.cfg.pos_grid();
        let mut pos = b.var(self.pos_embed);
        if grid != (gh, gw) {
            let map = tokens_to_map(g, pos, gh, gw)?;
            let map = g.bilinear_resize(map, grid.0, grid.1)?;
            pos = map_to_tokens(g, map)?;
        }
        Ok(g.add(tokens, pos)?)
    }

    /// Patch tokens with positions: `N × D`, `N = (H/p)·(W/p)`.
    pub fn patch_embed(&self, g: &mut Graph, b: &Binding, image: &Tensor) -> Result<Var, ModelError> {
        let (x, grid) = self.project_patches(g, b, image)?;
        self.add_positions(g, b, x, grid)
    }

    /// Runs blocks `range`, appending states and attention weights.
    fn run_blocks(
        &self,
        g: &mut Graph,
        b: &Binding,
        mut x: Var,
        range: std::ops::Range<usize>,
        states: &mut Vec<Var>,
        attn: &mut Vec<Vec<Var>>,
    ) -> Result<Var, ModelError> {
        for block in &self.blocks[range] {
            let (y, w) = block.forward(g, b, x)?;
            x = y;
            states.push(x);
            attn.push(w);
        }
        Ok(x)
    }

    /// All blocks in sequence with no adapter; returns the state after each block.
    pub fn transformer_encode(&self, g: &mut Graph, b: &Binding, tokens: Var) -> Result<(Vec<Var>, Vec<Vec<Var>>), ModelError> {
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut attn = Vec::with_capacity(self.blocks.len());
        self.run_blocks(g, b, tokens, 0..self.blocks.len(), &mut states, &mut attn)?;
        Ok((states, attn))
    }

    pub fn spm_forward(&self, g: &mut Graph, b: &Binding, image: Var) -> Result<MultiScaleFeatures, ModelError> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 {
            return Err(ModelError::Geometry(format!("expected a 1×H×W image, got {shape:?}")));
        }
        let r = self.cfg.max_reduction();
        if shape[1] % r != 0 || shape[2] % r != 0 {
            return Err(ModelError::Geometry(format!("image extent {}×{} is not divisible by reduction {r}", shape[1], shape[2])));
        }
        self.spm.forward(g, b, image)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, image: &Tensor) -> Result<BackboneOutput, ModelError> {
        if image.shape().len() != 3 {
            return Err(ModelError::Geometry(format!("expected a 1×H×W image, got {:?}", image.shape())));
        }
        self.cfg.check_extent(image.shape()[1], image.shape()[2])?;
        let mut x = self.patch_embed(g, b, image)?;
        let img = g.constant(image.clone());
        let priors = self.spm_forward(g, b, img)?;
        let mut feats = priors.clone();
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut attn = Vec::with_capacity(self.blocks.len());
        let mut injected = Vec::new();
        let first = self.cfg.interaction_points.first().copied().unwrap_or(self.cfg.depth);
        x = self.run_blocks(g, b, x, 0..first, &mut states, &mut attn)?;
        for ((range, inj), ext) in self.cfg.block_groups().into_iter().zip(&self.injectors).zip(&self.extractors) {
            x = inj.forward(g, b, x, &feats)?;
            injected.push(x);
            x = self.run_blocks(g, b, x, range, &mut states, &mut attn)?;
            feats = ext.forward(g, b, x, &feats)?;
        }
        Ok(BackboneOutput { features: feats, priors, block_states: states, block_attention: attn, injected })
    }
}
