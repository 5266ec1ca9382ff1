//! Full segmentation model over a single parameter store.

use serde::{Deserialize, Serialize};

use crate::backbone::mim::{mim_corrupt, mim_loss, MimHead, VisualCodebook};
use crate::backbone::{Backbone, BackboneConfig};
use crate::datakit::{GrayImage, LabelMask};
use crate::decoder::{semantic_inference, training_loss, Decoder, DecoderConfig, DecoderOutput, GtSegment, LossBreakdown};
use crate::nn::{Binding, Init, ParamStore};
use crate::numkit::{Graph, Tensor, Var};
use crate::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Visual-token vocabulary size of the pretraining head.
    pub vocab: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self { backbone: BackboneConfig::desk(), decoder: DecoderConfig::desk(num_classes), vocab: 64 }
    }

    pub fn full() -> Self {
        Self { backbone: BackboneConfig::full(), decoder: DecoderConfig::full(), vocab: 512 }
    }
}

/// Grayscale intensities scaled to roughly unit range around zero.
pub fn image_tensor(image: &GrayImage) -> Tensor {
    let data = image.data().iter().map(|&v| (f64::from(v) / 255.0 - 0.5) / 0.25).collect();
    Tensor::new(&[1, image.height(), image.width()], data).expect("nonempty image")
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub mim: MimHead,
}

/// Loss value, per-term breakdown and one gradient per stored parameter.
pub struct StepResult {
    pub loss: f64,
    pub parts: LossBreakdown,
    pub grads: Vec<Tensor>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if cfg.vocab == 0 {
            return Err(ModelError::Config("vocab must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone)?;
        let decoder = Decoder::new(&mut store, &mut init, &cfg.decoder, cfg.backbone.embed_dim, cfg.backbone.scales.len())?;
        let mim = MimHead::new(&mut store, &mut init, cfg.backbone.embed_dim, cfg.vocab);
        Ok(Self { cfg: cfg.clone(), store, backbone, decoder, mim })
    }

    /// Backbone, pixel decoder and transformer decoder on one image.
    pub fn forward(&self, g: &mut Graph, b: &Binding, image: &Tensor) -> Result<DecoderOutput, ModelError> {
        let feats = self.backbone.forward(g, b, image)?.features;
        let px = self.decoder.pixel_decode(g, b, &feats)?;
        self.decoder.forward(g, b, &px)
    }

    /// Masked-image-modeling loss graph for one image.
    pub fn mim_loss(&self, g: &mut Graph, b: &Binding, image: &Tensor, targets: &[usize], ratio: f64, seed: u64) -> Result<Var, ModelError> {
        let (tokens, grid) = self.backbone.project_patches(g, b, image)?;
        let (corrupted, masked) = mim_corrupt(g, tokens, ratio, b.var(self.mim.mask_emb), seed)?;
        let x = self.backbone.add_positions(g, b, corrupted, grid)?;
        let (states, _) = self.backbone.transformer_encode(g, b, x)?;
        let last = states.last().copied().unwrap_or(x);
        let logits = self.mim.logits(g, b, last)?;
        mim_loss(g, logits, targets, &masked)
    }

    pub fn mim_step(&self, image: &Tensor, codebook: &VisualCodebook, ratio: f64, seed: u64) -> Result<StepResult, ModelError> {
        let targets = codebook.tokenize(image)?;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let loss = self.mim_loss(&mut g, &b, image, &targets, ratio, seed)?;
        let grads = g.gradient(loss, b.vars())?;
        Ok(StepResult { loss: g.value(loss).item(), parts: LossBreakdown::default(), grads })
    }

    /// Ground-truth segments at the decoder's output resolution.
    pub fn segments(&self, mask: &LabelMask) -> Result<Vec<GtSegment>, ModelError> {
        let (w, h) = mask.extent();
        let segs = GtSegment::from_label_mask(mask, w / 4, h / 4);
        if segs.len() > self.cfg.decoder.num_queries {
            return Err(ModelError::Capacity { segments: segs.len(), queries: self.cfg.decoder.num_queries });
        }
        Ok(segs)
    }

    pub fn segmentation_step(&self, image: &Tensor, gt: &[GtSegment]) -> Result<StepResult, ModelError> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let out = self.forward(&mut g, &b, image)?;
        let (loss, parts) = training_loss(&mut g, &out.outputs, gt, &self.cfg.decoder)?;
        let grads = g.gradient(loss, b.vars())?;
        Ok(StepResult { loss: g.value(loss).item(), parts, grads })
    }

    /// Label map at the image's own extent.
    pub fn predict(&self, image: &GrayImage) -> Result<LabelMask, ModelError> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let out = self.forward(&mut g, &b, &image_tensor(image))?;
        let last = out.outputs.last().expect("at least the initial prediction");
        semantic_inference(
            g.value(last.class_logits),
            g.value(last.mask_logits),
            self.cfg.decoder.background_floor,
            image.height(),
            image.width(),
        )
    }
}
