//! Dataset ingestion, the class palette, resize and split conventions, and
//! the class-rebalancing augmentation planner.

mod augment;
mod io;
mod palette;
mod plan;
mod sample;
mod split;
pub mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use augment::{apply_augmentations, hflip, jitter, rotate, AugmentConfig};
pub use io::{
    load_dataset, read_gray_png, read_mask_png, write_dataset, write_gray_png, write_rgb_png, DatasetManifest, ManifestEntry,
    ManifestFile, Split,
};
pub use palette::{ClassPalette, PaletteEntry};
pub use plan::{class_frequencies, plan_augmentation, AugmentationPlan, PlanEntry};
pub use sample::{resize_sample, GrayImage, Grid, ImageSample, LabelMask, SourceKind};
pub use split::split_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("no mask found for image {image}")]
    Pairing { image: PathBuf },
    #[error("mask {path} holds value {value} outside the palette")]
    Label { path: PathBuf, value: u8 },
    #[error("sample {id}: image extent {image:?} differs from mask extent {mask:?}")]
    Geometry { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error("invalid palette: {0}")]
    Palette(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("every class count is zero; nothing to augment")]
    EmptyDataset,
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
