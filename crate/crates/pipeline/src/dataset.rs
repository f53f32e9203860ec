use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sevit_core::data::{generate_synthetic, Dataset, SyntheticConfig};

use crate::config::DataConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Class name to label, after relabeling.
    pub classes: BTreeMap<String, u32>,
    /// Class directory to the class name it was merged into.
    pub directories: BTreeMap<String, String>,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    pub train: Vec<FileEntry>,
    pub validation: Vec<FileEntry>,
    pub test: Vec<FileEntry>,
    /// Files that could not be decoded.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[FileEntry] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.retain(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')));
    entries.sort();
    Ok(entries)
}

/// Scans `root/<class>/<image>`, relabels classes and makes a seeded split.
///
/// Every file is decoded once; files that fail are skipped with a warning.
pub fn ingest_dataset(root: &Path, config: &DataConfig, seed: u64) -> Result<DatasetManifest> {
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        bail!("{} contains no class directories", root.display());
    }
    let mut directories = BTreeMap::new();
    for dir in &dirs {
        let name = dir_name(dir);
        let class = config.relabel.get(&name).cloned().unwrap_or_else(|| name.clone());
        directories.insert(name, class);
    }
    if let Some(unknown) = config.relabel.keys().find(|k| !directories.contains_key(*k)) {
        bail!("relabel map names class directory `{unknown}`, which does not exist");
    }
    let mut names: Vec<&String> = directories.values().collect();
    names.sort();
    names.dedup();
    let classes: BTreeMap<String, u32> = names.into_iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();

    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for dir in &dirs {
        let name = dir_name(dir);
        let label = classes[&directories[&name]];
        let mut decoded = 0;
        for path in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let rel = format!("{name}/{}", path.file_name().unwrap().to_string_lossy());
            match image::open(&path) {
                Ok(_) => {
                    files.push(FileEntry { path: rel, label });
                    decoded += 1;
                }
                Err(err) => {
                    warn!("skipping {}: {err}", path.display());
                    skipped.push(rel);
                }
            }
        }
        if decoded == 0 {
            bail!("class directory {} has no decodable images", dir.display());
        }
    }
    if !skipped.is_empty() {
        warn!("skipped {} undecodable file(s)", skipped.len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    files.shuffle(&mut rng);
    let n = files.len();
    let n_train = (config.fractions[0] * n as f64).round() as usize;
    let n_val = ((config.fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = files.split_off(n_train + n_val);
    let validation = files.split_off(n_train);
    if files.is_empty() || test.is_empty() {
        bail!("{n} images are too few for split fractions {:?}", config.fractions);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        directories,
        fractions: config.fractions,
        split_seed: seed,
        train: files,
        validation,
        test,
        skipped,
    })
}

fn dir_name(path: &Path) -> String {
    path.file_name().unwrap().to_string_lossy().into_owned()
}

/// Decodes one image into channel-major `[0, 1]` values, resized bilinearly.
pub fn decode_image(path: &Path, channels: usize, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    let side = size as u32;
    let resize = |img: DynamicImage| {
        if img.width() == side && img.height() == side {
            img
        } else {
            img.resize_exact(side, side, FilterType::Triangle)
        }
    };
    match channels {
        1 => Ok(resize(img).to_luma8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()),
        3 => {
            let rgb = resize(img).to_rgb8();
            let plane = size * size;
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = f32::from(px[c]) / 255.0;
                }
            }
            Ok(out)
        }
        other => bail!("unsupported channel count {other}"),
    }
}

/// Loads one split of a manifest into memory.
pub fn load_split(manifest: &DatasetManifest, split: Split, channels: usize, size: usize) -> Result<Dataset> {
    let entries = manifest.split(split);
    let mut pixels = Vec::with_capacity(entries.len() * channels * size * size);
    for entry in entries {
        pixels.extend(decode_image(&manifest.root.join(&entry.path), channels, size)?);
    }
    Ok(Dataset::new(
        channels,
        size,
        manifest.num_classes(),
        entries.iter().map(|e| e.path.clone()).collect(),
        entries.iter().map(|e| e.label).collect(),
        pixels,
    )?)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a synthetic dataset as 8-bit PNGs under `root/class{k}/`.
/// Returns the number of files written.
pub fn write_synthetic(root: &Path, config: &SyntheticConfig, seed: u64) -> Result<usize> {
    let data = generate_synthetic(config, seed)?;
    let size = data.image_size as u32;
    let plane = data.image_size * data.image_size;
    let mut counts = vec![0usize; data.num_classes];
    for k in 0..data.num_classes {
        std::fs::create_dir_all(root.join(format!("class{k}")))?;
    }
    for i in 0..data.len() {
        let label = data.labels[i] as usize;
        let sample = data.sample(i);
        let path = root.join(format!("class{label}")).join(format!("{:05}.png", counts[label]));
        counts[label] += 1;
        match data.channels {
            1 => {
                let img: GrayImage = ImageBuffer::from_raw(size, size, sample.iter().map(|&v| to_u8(v)).collect())
                    .context("image buffer size")?;
                img.save(&path)?;
            }
            3 => {
                let raw = (0..plane).flat_map(|p| (0..3).map(move |c| to_u8(sample[c * plane + p]))).collect();
                let img: RgbImage = ImageBuffer::from_raw(size, size, raw).context("image buffer size")?;
                img.save(&path)?;
            }
            other => bail!("unsupported channel count {other}"),
        }
    }
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(root: &Path, per_class: usize, classes: usize) {
        let config = SyntheticConfig {
            image_size: 8,
            cell_size: 4,
            num_classes: classes,
            samples_per_class: per_class,
            ..Default::default()
        };
        write_synthetic(root, &config, 3).unwrap();
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 50, 2);
        let manifest = ingest_dataset(dir.path(), &DataConfig::default(), 1).unwrap();
        assert_eq!((manifest.train.len(), manifest.validation.len(), manifest.test.len()), (80, 10, 10));
        let mut all: Vec<&str> = manifest
            .train
            .iter()
            .chain(&manifest.validation)
            .chain(&manifest.test)
            .map(|e| e.path.as_str())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(manifest, ingest_dataset(dir.path(), &DataConfig::default(), 1).unwrap());
        let train_test = DataConfig {
            fractions: [0.8, 0.0, 0.2],
            ..Default::default()
        };
        let manifest = ingest_dataset(dir.path(), &train_test, 1).unwrap();
        assert_eq!((manifest.train.len(), manifest.validation.len(), manifest.test.len()), (80, 0, 20));
    }

    #[test]
    fn relabel_merges_classes() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 2, 5);
        let mut relabel = BTreeMap::new();
        relabel.insert("class0".to_string(), "Normal".to_string());
        for k in 1..5 {
            relabel.insert(format!("class{k}"), "DR".to_string());
        }
        let config = DataConfig {
            relabel,
            ..Default::default()
        };
        let manifest = ingest_dataset(dir.path(), &config, 0).unwrap();
        assert_eq!(manifest.num_classes(), 2);
        assert_eq!(manifest.classes["DR"], 0);
        assert_eq!(manifest.classes["Normal"], 1);
        let normal = manifest
            .train
            .iter()
            .chain(&manifest.validation)
            .chain(&manifest.test)
            .filter(|e| e.label == 1)
            .count();
        assert_eq!(normal, 2);
    }

    #[test]
    fn undecodable_files_are_skipped_and_empty_classes_fail() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 10, 2);
        std::fs::write(dir.path().join("class0/broken.png"), b"not an image").unwrap();
        let manifest = ingest_dataset(dir.path(), &DataConfig::default(), 0).unwrap();
        assert_eq!(manifest.skipped, vec!["class0/broken.png".to_string()]);
        assert_eq!(manifest.train.len() + manifest.validation.len() + manifest.test.len(), 20);
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(ingest_dataset(dir.path(), &DataConfig::default(), 0).is_err());
    }

    #[test]
    fn decoded_pixels_match_the_generator_up_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let config = SyntheticConfig {
            image_size: 8,
            cell_size: 4,
            samples_per_class: 3,
            ..Default::default()
        };
        write_synthetic(dir.path(), &config, 5).unwrap();
        let data = generate_synthetic(&config, 5).unwrap();
        let first = data.labels.iter().position(|&l| l == 0).unwrap();
        let decoded = decode_image(&dir.path().join("class0/00000.png"), 1, 8).unwrap();
        for (a, b) in decoded.iter().zip(data.sample(first)) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let resized = decode_image(&dir.path().join("class0/00000.png"), 3, 4).unwrap();
        assert_eq!(resized.len(), 3 * 16);
    }
}
