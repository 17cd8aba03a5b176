//! Binary caches of per-sample caption embeddings.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TTEC" | version u32 = 1 | kind u8 (0 raw, 1 whitened) | d_txt u32 | count u64
//! count x ( id_len u16 | id bytes (UTF-8) | d_txt x f32 )
//! whitened only: mean d_txt x f64 | inv_sqrt_cov d_txt^2 x f64 (row-major)
//! ```
//!
//! Rows are held as `f64` in memory and stored as `f32`, so a round trip is
//! exact for rows that are already `f32`-representable (pseudo-encoded
//! captions always are). The whitening floor is not part of the format and
//! loads as `0.0`.

use std::fs;
use std::path::Path;

use textalign_core::linalg::Matrix;
use textalign_core::text_targets::{RawEmbeddingSet, WhitenedTargetSet, WhiteningStats};

use crate::error::{IoContext, LabError, Result};

pub const MAGIC: [u8; 4] = *b"TTEC";
pub const VERSION: u32 = 1;
pub const KIND_RAW: u8 = 0;
pub const KIND_WHITENED: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingCache {
    Raw(RawEmbeddingSet),
    Whitened(WhitenedTargetSet),
}

impl EmbeddingCache {
    pub fn kind(&self) -> u8 {
        match self {
            EmbeddingCache::Raw(_) => KIND_RAW,
            EmbeddingCache::Whitened(_) => KIND_WHITENED,
        }
    }

    /// The per-sample rows (whitened targets for a whitened cache).
    pub fn rows(&self) -> &RawEmbeddingSet {
        match self {
            EmbeddingCache::Raw(r) => r,
            EmbeddingCache::Whitened(w) => &w.targets,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows().dim()
    }

    /// Targets for training: a raw cache is used as-is.
    pub fn into_targets(self) -> WhitenedTargetSet {
        match self {
            EmbeddingCache::Raw(r) => WhitenedTargetSet::unwhitened(&r),
            EmbeddingCache::Whitened(w) => w,
        }
    }
}

pub fn encode(cache: &EmbeddingCache) -> Result<Vec<u8>> {
    let rows = cache.rows();
    let d = rows.dim();
    let dim32 = u32::try_from(d).map_err(|_| LabError::Invalid(format!("d_txt {d} too large")))?;
    let mut out = Vec::with_capacity(21 + rows.len() * (2 + 16 + 4 * d));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cache.kind());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (id, row) in rows.iter() {
        let len = u16::try_from(id.len()).map_err(|_| LabError::Invalid(format!("sample id too long: {id}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let EmbeddingCache::Whitened(w) = cache {
        if w.stats.mean.len() != d || w.stats.inv_sqrt_cov.rows() != d || w.stats.inv_sqrt_cov.cols() != d {
            return Err(LabError::DimMismatch {
                expected: d,
                found: w.stats.mean.len(),
            });
        }
        for &v in w.stats.mean.iter().chain(w.stats.inv_sqrt_cov.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LabError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingCache> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.array::<4>("magic")?;
    if magic != MAGIC {
        return Err(LabError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(LabError::UnsupportedVersion {
            format: "TTEC",
            version,
        });
    }
    let kind = r.array::<1>("kind")?[0];
    if kind > KIND_WHITENED {
        return Err(LabError::UnknownKind(kind));
    }
    let d = u32::from_le_bytes(r.array("d_txt")?) as usize;
    let count = u64::from_le_bytes(r.array("count")?);
    if d == 0 {
        return Err(LabError::Malformed("d_txt is zero".into()));
    }
    let mut rows = RawEmbeddingSet::new(d);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array("record id length")?) as usize;
        let id = std::str::from_utf8(r.take(len, "record id")?)
            .map_err(|_| LabError::Malformed("sample id is not UTF-8".into()))?;
        let raw = r.take(4 * d, "record vector")?;
        let row = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect();
        rows.insert(id, row).map_err(|e| LabError::Malformed(e.to_string()))?;
    }
    let cache = if kind == KIND_WHITENED {
        let mut read_f64s = |n: usize, what| -> Result<Vec<f64>> {
            Ok(r.take(8 * n, what)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect())
        };
        let mean = read_f64s(d, "whitening mean")?;
        let inv = read_f64s(d * d, "whitening matrix")?;
        EmbeddingCache::Whitened(WhitenedTargetSet {
            stats: WhiteningStats {
                mean,
                inv_sqrt_cov: Matrix::from_vec(d, d, inv)?,
                floor: 0.0,
            },
            targets: rows,
        })
    } else {
        EmbeddingCache::Raw(rows)
    };
    if r.pos != bytes.len() {
        return Err(LabError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(cache)
}

pub fn save_cache(cache: &EmbeddingCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(cache)?).at(path)
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    let path = path.as_ref();
    decode(&fs::read(path).at(path)?)
}

/// Loads a cache and checks its dimension.
pub fn load_cache_with_dim(path: impl AsRef<Path>, d_txt: usize) -> Result<EmbeddingCache> {
    let cache = load_cache(path)?;
    if cache.dim() != d_txt {
        return Err(LabError::DimMismatch {
            expected: d_txt,
            found: cache.dim(),
        });
    }
    Ok(cache)
}
