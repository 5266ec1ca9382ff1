use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{ClassPalette, DataError, Grid, GrayImage, ImageSample, LabelMask, SourceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Loaded samples plus an optional train/test assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples, split: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples assigned to `split`, in manifest order.
    pub fn subset(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| self.split.get(&s.id) == Some(&split)).collect()
    }
}

/// One row of the optional `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Class the sample was generated for, when produced by augmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_for: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub samples: Vec<ManifestEntry>,
}

impl ManifestFile {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Grid::new(w as usize, h as usize, gray.into_raw()).expect("consistent buffer"))
}

/// Reads an 8-bit single-channel mask; every value must be a palette id.
pub fn read_mask_png(path: &Path, palette: &ClassPalette) -> Result<LabelMask, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    if img.color() != ColorType::L8 {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            message: format!("mask must be 8-bit single channel, found {:?}", img.color()),
        });
    }
    let buf = img.into_luma8();
    let (w, h) = buf.dimensions();
    let mask = Grid::new(w as usize, h as usize, buf.into_raw()).expect("consistent buffer");
    if let Some(&bad) = mask.data().iter().find(|&&v| !palette.contains(v)) {
        return Err(DataError::Label { path: path.to_path_buf(), value: bad });
    }
    Ok(mask)
}

pub fn write_gray_png(path: &Path, grid: &Grid<u8>) -> Result<(), DataError> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, grid.data().to_vec()).expect("consistent buffer");
    buf.save(path).map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<(), DataError> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, rgb).expect("consistent buffer");
    buf.save(path).map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `root/images/<id>.png` paired with `root/masks/<id>.png`, taking
/// source kinds and splits from `root/manifest.json` when present.
pub fn load_dataset(root: &Path, palette: &ClassPalette) -> Result<DatasetManifest, DataError> {
    let masks_dir = root.join("masks");
    let meta = {
        let path = root.join("manifest.json");
        if path.exists() {
            ManifestFile::load(&path)?.samples.into_iter().map(|e| (e.id.clone(), e)).collect()
        } else {
            BTreeMap::new()
        }
    };
    let mut manifest = DatasetManifest::default();
    for (id, image_path) in png_stems(&root.join("images"))? {
        let mask_path = masks_dir.join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(DataError::Pairing { image: image_path });
        }
        let image = read_gray_png(&image_path)?;
        let mask = read_mask_png(&mask_path, palette)?;
        let entry = meta.get(&id);
        let kind = entry.map(|e| e.source_kind).unwrap_or_default();
        if let Some(split) = entry.and_then(|e| e.split) {
            manifest.split.insert(id.clone(), split);
        }
        manifest.samples.push(ImageSample::new(id, image, mask, kind)?);
    }
    Ok(manifest)
}

/// Writes samples in the layout [`load_dataset`] reads, including the palette
/// and a manifest carrying source kinds, splits and augmentation provenance.
pub fn write_dataset(
    root: &Path,
    samples: &[ImageSample],
    palette: &ClassPalette,
    split: &BTreeMap<String, Split>,
    augmented_for: &BTreeMap<String, u8>,
) -> Result<(), DataError> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    let mut file = ManifestFile::default();
    for s in samples {
        write_gray_png(&images.join(format!("{}.png", s.id)), &s.image)?;
        write_gray_png(&masks.join(format!("{}.png", s.id)), &s.mask)?;
        file.samples.push(ManifestEntry {
            id: s.id.clone(),
            source_kind: s.source_kind,
            split: split.get(&s.id).copied(),
            augmented_for: augmented_for.get(&s.id).copied(),
        });
    }
    palette.save(&root.join("palette.json"))?;
    file.save(&root.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dir: &Path) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
    }

    fn sample(id: &str, w: usize, h: usize, label: u8) -> ImageSample {
        let image = Grid::from_fn(w, h, |x, y| (x * 10 + y) as u8);
        let mask = Grid::from_fn(w, h, |x, _| if x % 2 == 0 { label } else { 0 });
        ImageSample::new(id, image, mask, SourceKind::Opg).unwrap()
    }

    #[test]
    fn empty_directories_give_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        setup(dir.path());
        let m = load_dataset(dir.path(), &ClassPalette::dental()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn three_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let palette = ClassPalette::dental();
        let samples = vec![sample("a", 5, 4, 1), sample("b", 6, 3, 7), sample("c", 2, 2, 33)];
        let mut split = BTreeMap::new();
        split.insert("b".to_string(), Split::Test);
        write_dataset(dir.path(), &samples, &palette, &split, &BTreeMap::new()).unwrap();
        let m = load_dataset(dir.path(), &palette).unwrap();
        assert_eq!(m.samples, samples);
        assert_eq!(m.split, split);
    }

    #[test]
    fn out_of_palette_value_is_a_label_error() {
        let dir = tempfile::tempdir().unwrap();
        setup(dir.path());
        let s = sample("bad", 4, 4, 200);
        write_gray_png(&dir.path().join("images/bad.png"), &s.image).unwrap();
        write_gray_png(&dir.path().join("masks/bad.png"), &s.mask).unwrap();
        let err = load_dataset(dir.path(), &ClassPalette::dental()).unwrap_err();
        match err {
            DataError::Label { path, value } => {
                assert_eq!(value, 200);
                assert!(path.ends_with("masks/bad.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_mask_is_a_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        setup(dir.path());
        write_gray_png(&dir.path().join("images/lonely.png"), &Grid::filled(3, 3, 9)).unwrap();
        assert!(matches!(load_dataset(dir.path(), &ClassPalette::dental()), Err(DataError::Pairing { .. })));
    }

    #[test]
    fn extent_mismatch_is_a_geometry_error() {
        let dir = tempfile::tempdir().unwrap();
        setup(dir.path());
        write_gray_png(&dir.path().join("images/x.png"), &Grid::filled(3, 3, 9)).unwrap();
        write_gray_png(&dir.path().join("masks/x.png"), &Grid::filled(4, 3, 0)).unwrap();
        assert!(matches!(load_dataset(dir.path(), &ClassPalette::dental()), Err(DataError::Geometry { .. })));
    }

    #[test]
    fn manifest_sets_source_kind() {
        let dir = tempfile::tempdir().unwrap();
        let palette = ClassPalette::dental();
        let mut s = sample("p", 3, 3, 2);
        s.source_kind = SourceKind::Periapical;
        write_dataset(dir.path(), &[s], &palette, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let m = load_dataset(dir.path(), &palette).unwrap();
        assert_eq!(m.samples[0].source_kind, SourceKind::Periapical);
    }
}
