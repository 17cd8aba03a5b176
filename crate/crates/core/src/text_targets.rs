//! Per-sample semantic targets: a frozen hashed bag-of-tokens caption
//! encoder, corpus whitening and the resulting target sets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{psd_inv_sqrt, Matrix};

pub const DEFAULT_FLOOR: f64 = 1e-6;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 over the seed's 8 little-endian bytes followed by `bytes`.
pub fn seeded_fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased alphanumeric tokens of a caption.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(ToString::to_string)
        .collect()
}

/// Hashed bag-of-tokens embedding: every token adds a signed unit impulse
/// at `hash mod d_txt`, negative when bit 63 of the hash is set.
pub fn pseudo_encode(caption: &str, d_txt: usize, seed: u64) -> Result<Vec<f64>> {
    if d_txt < 8 {
        return Err(Error::Config(format!("d_txt must be at least 8, got {d_txt}")));
    }
    let mut out = vec![0.0; d_txt];
    for token in tokenize(caption) {
        let h = seeded_fnv1a(seed, token.as_bytes());
        let idx = (h % d_txt as u64) as usize;
        out[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    Ok(out)
}

/// Token-count summary of a caption corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLengthStats {
    pub count: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

pub fn caption_length_stats<'a>(captions: impl IntoIterator<Item = &'a str>) -> CaptionLengthStats {
    let lens: Vec<usize> = captions.into_iter().map(|c| tokenize(c).len()).collect();
    CaptionLengthStats {
        count: lens.len(),
        mean: if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        },
        min: lens.iter().copied().min().unwrap_or(0),
        max: lens.iter().copied().max().unwrap_or(0),
    }
}

/// Sample-id keyed embedding rows of a common dimension, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawEmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
}

impl RawEmbeddingSet {
    pub fn new(dim: usize) -> Self {
        RawEmbeddingSet {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::shape("embedding row", &[self.dim], &[row.len()]));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("embedding row `{id}`")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate sample id `{id}`")));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.rows.iter().map(Vec::as_slice))
    }

    /// Rows as an `n x dim` matrix.
    pub fn matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.rows.concat()).expect("rows share dim")
    }

    /// Pseudo-encodes `(id, caption)` pairs.
    pub fn from_captions<'a>(
        captions: impl IntoIterator<Item = (&'a str, &'a str)>,
        d_txt: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut set = RawEmbeddingSet::new(d_txt);
        for (id, caption) in captions {
            set.insert(id, pseudo_encode(caption, d_txt, seed)?)?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningStats {
    pub mean: Vec<f64>,
    pub inv_sqrt_cov: Matrix,
    pub floor: f64,
}

impl WhiteningStats {
    pub fn identity(dim: usize) -> Self {
        WhiteningStats {
            mean: vec![0.0; dim],
            inv_sqrt_cov: Matrix::identity(dim),
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Empirical mean and covariance (1/N normalization) of `rows`.
pub fn mean_and_covariance(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Matrix) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for r in rows {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            if centered[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Corpus mean and `Sigma^{-1/2}` (eigenvalues floored at `floor`).
pub fn fit_whitening(raw: &RawEmbeddingSet, floor: f64) -> Result<WhiteningStats> {
    if raw.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: raw.len(),
        });
    }
    let (mean, cov) = mean_and_covariance(raw.rows(), raw.dim());
    let inv_sqrt_cov = psd_inv_sqrt(&cov, floor)?;
    Ok(WhiteningStats {
        mean,
        inv_sqrt_cov,
        floor,
    })
}

/// `Sigma^{-1/2} (v - mu)`
pub fn whiten(v: &[f64], stats: &WhiteningStats) -> Result<Vec<f64>> {
    if v.len() != stats.dim() {
        return Err(Error::shape("whiten", &[stats.dim()], &[v.len()]));
    }
    let centered: Vec<f64> = v.iter().zip(&stats.mean).map(|(a, m)| a - m).collect();
    stats.inv_sqrt_cov.matvec(&centered)
}

/// Whitened per-sample targets together with the statistics that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedTargetSet {
    pub stats: WhiteningStats,
    pub targets: RawEmbeddingSet,
}

impl WhitenedTargetSet {
    /// Whitens every row of `raw` with `stats`.
    pub fn apply(raw: &RawEmbeddingSet, stats: WhiteningStats) -> Result<Self> {
        let mut targets = RawEmbeddingSet::new(raw.dim());
        for (id, row) in raw.iter() {
            targets.insert(id, whiten(row, &stats)?)?;
        }
        Ok(WhitenedTargetSet { stats, targets })
    }

    /// Fits whitening on `raw` and applies it to the same corpus.
    pub fn fit(raw: &RawEmbeddingSet, floor: f64) -> Result<Self> {
        let stats = fit_whitening(raw, floor)?;
        Self::apply(raw, stats)
    }

    /// Targets without whitening (identity statistics).
    pub fn unwhitened(raw: &RawEmbeddingSet) -> Self {
        WhitenedTargetSet {
            stats: WhiteningStats::identity(raw.dim()),
            targets: raw.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.targets.dim()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.targets.get(id)
    }
}
