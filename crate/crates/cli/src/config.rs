use std::path::{Path, PathBuf};

use radious_core::datakit::{AugmentConfig, ClassPalette};
use radious_core::model::ModelConfig;
use radious_core::training::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Class-rebalancing constants and the transform bounds used by `augment apply`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub a: f64,
    pub b: f64,
    pub total_target: u64,
    pub transforms: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, total_target: 23000, transforms: AugmentConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root with `images/` and `masks/`.
    pub dataset: PathBuf,
    /// Palette file; `<dataset>/palette.json` when omitted.
    #[serde(default)]
    pub palette: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Share of OPG samples used for training when the dataset carries no split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Count background as a class in mIoU and mAcc.
    #[serde(default = "default_true")]
    pub include_background: bool,
    pub model: ModelConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Parses and range-checks a config without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory and must exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.palette = cfg.palette.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<(), CliError> {
        if !self.dataset.is_dir() {
            return Err(CliError::Config(format!("dataset root {} does not exist", self.dataset.display())));
        }
        let palette = self.palette_path();
        if !palette.is_file() {
            return Err(CliError::Config(format!("palette {} does not exist", palette.display())));
        }
        Ok(())
    }

    pub fn palette_path(&self) -> PathBuf {
        self.palette.clone().unwrap_or_else(|| self.dataset.join("palette.json"))
    }

    pub fn palette(&self) -> Result<ClassPalette, CliError> {
        let palette = ClassPalette::load(&self.palette_path())?;
        if palette.num_foreground() != self.model.decoder.num_classes {
            return Err(CliError::Config(format!(
                "palette has {} foreground classes but the decoder predicts {}",
                palette.num_foreground(),
                self.model.decoder.num_classes
            )));
        }
        Ok(palette)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.backbone.validate()?;
        self.model.decoder.validate(self.model.backbone.embed_dim, self.model.backbone.scales.len())?;
        if self.pretrain.vocab != self.model.vocab {
            return bad(format!("pretrain.vocab {} differs from model.vocab {}", self.pretrain.vocab, self.model.vocab));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if !(self.pretrain.mask_ratio > 0.0 && self.pretrain.mask_ratio < 1.0) {
            return bad(format!("pretrain.mask_ratio {} must lie in (0, 1)", self.pretrain.mask_ratio));
        }
        if self.pretrain.batch_size == 0 || self.train.batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        self.pretrain.optimizer.validate()?;
        self.train.optimizer.validate()?;
        for (name, (w, h)) in [("pretrain.resize", self.pretrain.resize), ("train.resize", self.train.resize)] {
            if w == 0 || h == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let (w, h) = self.train.resize;
        self.model.backbone.check_extent(h, w)?;
        let (w, h) = self.pretrain.resize;
        if w % self.model.backbone.patch_size != 0 || h % self.model.backbone.patch_size != 0 {
            return bad(format!("pretrain.resize {:?} must be divisible by the patch size", self.pretrain.resize));
        }
        if !(self.augment.a > 0.0) || !(self.augment.b >= 1.0) || self.augment.total_target == 0 {
            return bad("augment needs a > 0, b >= 1 and total_target > 0".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
