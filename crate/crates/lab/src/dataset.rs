//! Dataset directories: one JSON manifest plus one raw image file per split.
//!
//! `<dir>/<split>.json` holds
//! `{"version":1, "classes":[..], "samples":[{"id","label","caption"}],
//! "image_file", "image_size", "channels"}` and `image_file` (relative to
//! the directory) is `n x H x W x C` contiguous little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textalign_core::data::{Dataset, Sample};

use crate::error::{IoContext, LabError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub image_file: String,
    pub image_size: usize,
    pub channels: usize,
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

pub fn save_split(dir: impl AsRef<Path>, split: &str, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).at(dir)?;
    data.validate()?;
    let image_file = format!("{split}.f32");
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: data.classes.clone(),
        samples: data
            .samples
            .iter()
            .map(|s| SampleEntry {
                id: s.id.clone(),
                label: s.label,
                caption: s.caption.clone(),
            })
            .collect(),
        image_file: image_file.clone(),
        image_size: data.image_size,
        channels: data.channels,
    };
    let mut bytes = Vec::with_capacity(data.samples.iter().map(|s| 4 * s.image.len()).sum());
    for s in &data.samples {
        for v in &s.image {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let img_path = dir.join(&image_file);
    fs::write(&img_path, bytes).at(&img_path)?;
    let path = manifest_path(dir, split);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)
}

pub fn load_manifest(dir: impl AsRef<Path>, split: &str) -> Result<Manifest> {
    let path = manifest_path(dir.as_ref(), split);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(LabError::UnsupportedVersion {
            format: "dataset manifest",
            version: manifest.version,
        });
    }
    Ok(manifest)
}

pub fn load_split(dir: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir, split)?;
    let img_path = dir.join(&manifest.image_file);
    let bytes = fs::read(&img_path).at(&img_path)?;
    let per = manifest.image_size * manifest.image_size * manifest.channels;
    let expected = 4 * per * manifest.samples.len();
    if bytes.len() < expected {
        return Err(LabError::Truncated("image file"));
    }
    if bytes.len() > expected {
        return Err(LabError::Malformed(format!(
            "image file holds {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let samples = manifest
        .samples
        .into_iter()
        .zip(bytes.chunks_exact(4 * per.max(1)))
        .map(|(e, raw)| Sample {
            id: e.id,
            label: e.label,
            caption: e.caption,
            image: raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        })
        .collect();
    let data = Dataset {
        classes: manifest.classes,
        image_size: manifest.image_size,
        channels: manifest.channels,
        samples,
    };
    data.validate()?;
    Ok(data)
}

/// Splits the first `n_train` samples off as the training split.
pub fn split_off(data: &Dataset, n_train: usize) -> (Dataset, Dataset) {
    let n_train = n_train.min(data.len());
    let part = |s: &[Sample]| Dataset {
        classes: data.classes.clone(),
        image_size: data.image_size,
        channels: data.channels,
        samples: s.to_vec(),
    };
    (part(&data.samples[..n_train]), part(&data.samples[n_train..]))
}
