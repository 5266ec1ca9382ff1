//! Command bodies, callable from tests without spawning the binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use radious_core::backbone::mim::fit_codebook;
use radious_core::datakit::synthetic::{synthetic_dataset, synthetic_palette};
use radious_core::datakit::{
    apply_augmentations, class_frequencies, load_dataset, plan_augmentation, read_gray_png, read_mask_png, resize_sample, split_dataset,
    write_dataset, write_gray_png, write_rgb_png, AugmentationPlan, ClassPalette, DatasetManifest, GrayImage, ImageSample, LabelMask, Split,
};
use radious_core::decoder::GtSegment;
use radious_core::metrics::{compare_reports, render_comparison, ComparisonRow, ConfusionMatrix, MetricReport};
use radious_core::model::{image_tensor, Model};
use radious_core::numkit::Tensor;
use radious_core::training::{self, EpochLog};

use crate::{Checkpoint, CliError, RunConfig};

/// Which part of the dataset a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            other => Err(format!("unknown split {other:?}; expected train, test or all")),
        }
    }
}

/// Loads the dataset and assigns a train/test split. A split stored in the
/// manifest wins; otherwise OPG samples are shuffled with `seed`.
pub fn load_split(cfg: &RunConfig, seed: u64) -> Result<(DatasetManifest, ClassPalette), CliError> {
    cfg.check_paths()?;
    let palette = cfg.palette()?;
    let m = load_dataset(&cfg.dataset, &palette)?;
    if m.is_empty() {
        return Err(CliError::Input(format!("dataset {} has no samples", cfg.dataset.display())));
    }
    let m = if m.split.len() == m.len() { m } else { split_dataset(&m, cfg.train_fraction, seed)? };
    Ok((m, palette))
}

pub fn select<'a>(m: &'a DatasetManifest, split: SplitChoice) -> Vec<&'a ImageSample> {
    match split {
        SplitChoice::Train => m.subset(Split::Train),
        SplitChoice::Test => m.subset(Split::Test),
        SplitChoice::All => m.samples.iter().collect(),
    }
}

fn write_log(path: &Path, header: &str, logs: &[EpochLog], with_parts: bool) -> Result<(), CliError> {
    let mut text = format!("{header}\n");
    for (i, l) in logs.iter().enumerate() {
        if with_parts {
            let _ = writeln!(text, "{i}\t{:.9}\t{:.9}\t{:.9}\t{:.9}", l.loss, l.parts.class, l.parts.bce, l.parts.dice);
        } else {
            let _ = writeln!(text, "{i}\t{:.9}", l.loss);
        }
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Path of the per-epoch loss log written next to a checkpoint.
pub fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.tsv");
    out.with_file_name(name)
}

/// Fresh model from the run config, with weights copied from `init` when
/// given; the checkpoint must hold the same tensor names and shapes.
fn init_model(cfg: &RunConfig, seed: u64, init: Option<&Path>) -> Result<Model, CliError> {
    let mut model = Model::new(&cfg.model, seed)?;
    if let Some(path) = init {
        Checkpoint::load(path)?.load_into(&mut model)?;
    }
    Ok(model)
}

/// Fits the visual codebook and runs masked-image-modeling epochs over the
/// training split. Writes the checkpoint to `out` and the loss log beside it.
pub fn pretrain(cfg: &RunConfig, seed: u64, init: Option<&Path>, out: &Path) -> Result<Vec<EpochLog>, CliError> {
    let (m, _) = load_split(cfg, seed)?;
    let (w, h) = cfg.pretrain.resize;
    let images: Vec<Tensor> = m.subset(Split::Train).into_iter().map(|s| image_tensor(&s.image.resize_bilinear(w, h))).collect();
    if images.is_empty() {
        return Err(CliError::Input("training split is empty".into()));
    }
    let codebook = fit_codebook(&images, cfg.model.backbone.patch_size, cfg.model.vocab, seed)?;
    let mut model = init_model(cfg, seed, init)?;
    let logs = training::pretrain(&mut model, &images, &codebook, &cfg.pretrain, seed, |e, l| log::info!("pretrain epoch {e}: mim loss {:.6}", l.loss))?;
    Checkpoint::from_model(&model, seed).save(out)?;
    write_log(&log_path(out), "epoch\tmim_loss", &logs, false)?;
    Ok(logs)
}

/// Supervised fine-tuning on the training split, optionally starting from a checkpoint.
pub fn train(cfg: &RunConfig, seed: u64, init: Option<&Path>, out: &Path) -> Result<Vec<EpochLog>, CliError> {
    let (m, _) = load_split(cfg, seed)?;
    let mut model = init_model(cfg, seed, init)?;
    let (w, h) = cfg.train.resize;
    let mut data: Vec<(Tensor, Vec<GtSegment>)> = Vec::new();
    for s in m.subset(Split::Train) {
        let r = resize_sample(s, w, h);
        let segs = model.segments(&r.mask).map_err(|source| CliError::Sample { id: s.id.clone(), source })?;
        data.push((image_tensor(&r.image), segs));
    }
    if data.is_empty() {
        return Err(CliError::Input("training split is empty".into()));
    }
    let logs = training::train(&mut model, &data, &cfg.train, seed, |e, l| {
        log::info!("train epoch {e}: loss {:.6} (class {:.4} bce {:.4} dice {:.4})", l.loss, l.parts.class, l.parts.bce, l.parts.dice)
    })?;
    Checkpoint::from_model(&model, seed).save(out)?;
    write_log(&log_path(out), "epoch\tloss\tclass\tbce\tdice", &logs, true)?;
    Ok(logs)
}

/// Prediction at the image's own extent: resized to the training extent,
/// inferred, then nearest-resized back.
pub fn predict(model: &Model, cfg: &RunConfig, image: &GrayImage) -> Result<LabelMask, CliError> {
    let (w, h) = cfg.train.resize;
    let pred = model.predict(&image.resize_bilinear(w, h))?;
    Ok(pred.resize_nearest(image.width(), image.height()))
}

/// Where `eval` gets its predictions.
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Returns the ground truth; checks the metric plumbing end to end.
    Identity,
}

pub fn evaluate(cfg: &RunConfig, samples: &[&ImageSample], predictor: Predictor<'_>, name: &str, palette: &ClassPalette) -> Result<MetricReport, CliError> {
    let mut cm = ConfusionMatrix::new(palette.len());
    for s in samples {
        let pred = match predictor {
            Predictor::Model(model) => predict(model, cfg, &s.image)?,
            Predictor::Identity => s.mask.clone(),
        };
        cm.accumulate(&pred, &s.mask)?;
    }
    Ok(cm.report(name, Some(palette), cfg.include_background)?)
}

/// Evaluates a checkpoint (or the identity stub when `checkpoint` is `None`)
/// on a split and writes the report to `out`.
pub fn eval(cfg: &RunConfig, seed: u64, checkpoint: Option<&Path>, split: SplitChoice, name: Option<&str>, out: &Path) -> Result<MetricReport, CliError> {
    let (m, palette) = load_split(cfg, seed)?;
    let samples = select(&m, split);
    let model = checkpoint.map(|p| Checkpoint::load(p).and_then(|c| c.to_model())).transpose()?;
    let default_name = checkpoint.and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "identity".into());
    let predictor = model.as_ref().map(Predictor::Model).unwrap_or(Predictor::Identity);
    let report = evaluate(cfg, &samples, predictor, name.unwrap_or(&default_name), &palette)?;
    report.save(out)?;
    Ok(report)
}

/// Palette colors alpha-blended at 0.5 over the grayscale image; background stays gray.
pub fn overlay(image: &GrayImage, mask: &LabelMask, palette: &ClassPalette) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(image.data().len() * 3);
    for (&v, &id) in image.data().iter().zip(mask.data()) {
        let c = palette.color(id);
        for ch in c {
            rgb.push(if id == 0 { v } else { ((u16::from(v) + u16::from(ch) + 1) / 2) as u8 });
        }
    }
    rgb
}

/// Path of the overlay written next to an inferred mask.
pub fn overlay_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_overlay.png"))
}

/// Writes the label mask to `out` and the overlay to [`overlay_path`].
pub fn infer(cfg: &RunConfig, checkpoint: &Path, image_path: &Path, out: &Path) -> Result<LabelMask, CliError> {
    let palette = cfg.palette()?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let image = read_gray_png(image_path)?;
    let mask = predict(&model, cfg, &image)?;
    write_gray_png(out, &mask)?;
    write_rgb_png(&overlay_path(out), image.width(), image.height(), overlay(&image, &mask, &palette))?;
    Ok(mask)
}

/// Rebalancing plan over the foreground classes of the training split.
pub fn augment_plan(cfg: &RunConfig, seed: u64) -> Result<(AugmentationPlan, DatasetManifest, ClassPalette), CliError> {
    let (m, palette) = load_split(cfg, seed)?;
    let train = DatasetManifest::new(m.subset(Split::Train).into_iter().cloned().collect());
    let freq = class_frequencies(&train, &palette);
    let counts: Vec<(u8, u64)> = palette.entries().iter().filter(|e| e.id != 0).map(|e| (e.id, freq[e.id as usize])).collect();
    let plan = plan_augmentation(&counts, cfg.augment.a, cfg.augment.b, cfg.augment.total_target)?;
    Ok((plan, train, palette))
}

/// Materializes the plan: for each class, `target` variants drawn round-robin
/// from the training samples that contain it. The output holds only the
/// generated samples, each tagged with the class it was made for.
pub fn augment_apply(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(AugmentationPlan, usize), CliError> {
    let (plan, train, palette) = augment_plan(cfg, seed)?;
    let mut samples = Vec::new();
    let mut made_for = BTreeMap::new();
    for e in &plan.entries {
        let sources: Vec<&ImageSample> = train.samples.iter().filter(|s| s.mask.data().contains(&e.class_id)).collect();
        if sources.is_empty() {
            continue;
        }
        for k in 0..e.target_count as usize {
            let src = sources[k % sources.len()];
            let vseed = seed ^ (u64::from(e.class_id) << 40) ^ k as u64;
            let mut v = apply_augmentations(src, 1, vseed, &cfg.augment.transforms).remove(0);
            v.id = format!("aug-c{:02}-{k:06}", e.class_id);
            made_for.insert(v.id.clone(), e.class_id);
            samples.push(v);
        }
    }
    write_dataset(out, &samples, &palette, &BTreeMap::new(), &made_for)?;
    Ok((plan, samples.len()))
}

pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<(Vec<ComparisonRow>, String), CliError> {
    let reports = paths.iter().map(|p| MetricReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let rows = compare_reports(&reports)?;
    if let Some(out) = out {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    }
    let table = render_comparison(&rows);
    Ok((rows, table))
}

/// Writes the procedural shapes dataset with its four-class palette.
pub fn synth(out: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 || width < 16 || height < 16 {
        return Err(CliError::Input("synth needs count >= 1 and extents >= 16".into()));
    }
    let samples = synthetic_dataset(count, width, height, seed);
    write_dataset(out, &samples, &synthetic_palette(), &BTreeMap::new(), &BTreeMap::new())?;
    Ok(())
}

/// Reads a mask back through the dataset loader's checks.
pub fn read_mask(path: &Path, palette: &ClassPalette) -> Result<LabelMask, CliError> {
    Ok(read_mask_png(path, palette)?)
}
