//! Synthetic captioned-shapes corpus, label-noise injection and stratified
//! subsetting.
//!
//! Each image shows one colored shape on a noisy gray background. The class
//! is the (color, shape) pair; the caption also names the shape's size and
//! coarse position, which the label does not carry.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 3;

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.10, 0.78, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("magenta", [0.88, 0.10, 0.88]),
    ("cyan", [0.10, 0.88, 0.90]),
    ("orange", [1.00, 0.55, 0.00]),
    ("white", [0.97, 0.97, 0.97]),
];

pub const SHAPES: [&str; 6] = ["triangle", "square", "disk", "cross", "ring", "diamond"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H x W x 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: usize,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn with_labels(&self, labels: &[usize]) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::shape("labels", &[self.len()], &[labels.len()]));
        }
        let mut out = self.clone();
        for (s, &y) in out.samples.iter_mut().zip(labels) {
            if y >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.num_classes(),
                });
            }
            s.label = y;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.image_size * self.image_size * self.channels;
        for s in &self.samples {
            if s.image.len() != len {
                return Err(Error::shape("sample image", &[len], &[s.image.len()]));
            }
            if s.label >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.num_classes(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    #[serde(default = "default_noise")]
    pub pixel_noise_std: f64,
    pub seed: u64,
}

fn default_image_size() -> usize {
    32
}

fn default_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.n_colors * self.n_shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_colors == 0 || self.n_colors > COLORS.len() {
            return Err(Error::Config(format!("n_colors must be in 1..={}", COLORS.len())));
        }
        if self.n_shapes == 0 || self.n_shapes > SHAPES.len() {
            return Err(Error::Config(format!("n_shapes must be in 1..={}", SHAPES.len())));
        }
        if self.n_samples < self.num_classes() {
            return Err(Error::Config(format!(
                "n_samples {} is below the class count {}",
                self.n_samples,
                self.num_classes()
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(self.pixel_noise_std >= 0.0) {
            return Err(Error::Config("pixel_noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_classes());
        for (color, _) in COLORS.iter().take(self.n_colors) {
            for shape in SHAPES.iter().take(self.n_shapes) {
                names.push(format!("{color} {shape}"));
            }
        }
        names
    }
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    let dist2 = dx * dx + dy * dy;
    match shape {
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        "disk" => dist2 <= r * r,
        "triangle" => dy >= -r && dy <= 0.7 * r && dx.abs() <= (dy + r) / 1.7,
        "cross" => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        "ring" => dist2 <= r * r && dist2 >= 0.3 * r * r,
        "diamond" => dx.abs() + dy.abs() <= r,
        _ => false,
    }
}

fn coarse_position(center: f64, size: f64, names: [&'static str; 3]) -> &'static str {
    let third = size / 3.0;
    if center < third {
        names[0]
    } else if center < 2.0 * third {
        names[1]
    } else {
        names[2]
    }
}

/// Renders a stratified, shuffled corpus. Labels are assigned round-robin
/// before shuffling, so class counts differ by at most one.
pub fn generate_shapes(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let classes = spec.num_classes();
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);

    let s = spec.image_size;
    let sf = s as f64;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for (i, &label) in labels.iter().enumerate() {
        let (color_name, rgb) = COLORS[label / spec.n_shapes];
        let shape = SHAPES[label % spec.n_shapes];
        let radius = rng.uniform(sf / 7.0, sf / 4.0);
        let margin = radius + 0.5;
        let cx = rng.uniform(margin, sf - margin);
        let cy = rng.uniform(margin, sf - margin);
        let background = rng.uniform(0.25, 0.55) as f32;

        let mut image = vec![0.0f32; s * s * CHANNELS];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let on = inside(shape, dx, dy, radius);
                for ch in 0..CHANNELS {
                    let base = if on { rgb[ch] } else { background };
                    let noise = (rng.normal() * spec.pixel_noise_std) as f32;
                    image[(y * s + x) * CHANNELS + ch] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        let size = if radius < sf * (1.0 / 7.0 + 1.0 / 4.0) / 2.0 { "small" } else { "large" };
        let vertical = coarse_position(cy, sf, ["top", "middle", "bottom"]);
        let horizontal = coarse_position(cx, sf, ["left", "center", "right"]);
        samples.push(Sample {
            id: format!("shape-{i:06}"),
            image,
            label,
            caption: format!("{size} {color_name} {shape} at {vertical} {horizontal}"),
        });
    }
    Ok(Dataset {
        classes: spec.class_names(),
        image_size: s,
        channels: CHANNELS,
        samples,
    })
}

/// Result of [`inject_label_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    pub labels: Vec<usize>,
    pub flipped: usize,
    /// `rho` exceeded the well-studied range `[0, 0.5]`.
    pub beyond_tested_range: bool,
}

/// Replaces each label, independently with probability `rho`, by a uniform
/// draw over the other `classes - 1` classes.
pub fn inject_label_noise(labels: &[usize], rho: f64, classes: usize, seed: u64) -> Result<NoisyLabels> {
    if classes < 2 {
        return Err(Error::Config("label noise needs at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("noise rate {rho} outside [0, 1]")));
    }
    let mut rng = Rng::new(seed);
    let mut flipped = 0;
    let mut out = Vec::with_capacity(labels.len());
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        if rng.bernoulli(rho) {
            let k = rng.below(classes - 1);
            out.push(if k >= y { k + 1 } else { k });
            flipped += 1;
        } else {
            out.push(y);
        }
    }
    Ok(NoisyLabels {
        labels: out,
        flipped,
        beyond_tested_range: rho > 0.5,
    })
}

/// Stratified sample without replacement keeping `round(n_c * fraction)`
/// samples of every class, in original order.
pub fn subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut rng = Rng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut keep = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let count = libm::round(members.len() as f64 * fraction) as usize;
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        rng.shuffle(members);
        keep.extend_from_slice(&members[..count]);
    }
    keep.sort_unstable();
    Ok(Dataset {
        classes: dataset.classes.clone(),
        image_size: dataset.image_size,
        channels: dataset.channels,
        samples: keep.into_iter().map(|i| dataset.samples[i].clone()).collect(),
    })
}

/// Mirrors an `H x W x C` image left to right.
pub fn hflip(image: &[f32], size: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for y in 0..size {
        for x in 0..size {
            let src = (y * size + x) * channels;
            let dst = (y * size + size - 1 - x) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    out
}
