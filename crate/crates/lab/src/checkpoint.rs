//! Model checkpoints.
//!
//! ```text
//! "TTCK" | version u32 = 1 | meta_len u32 | meta JSON (meta_len bytes)
//! n_tensors u32 | n_tensors x ( name_len u16 | name | ndim u8 | ndim x u32 | f32 data )
//! ```
//!
//! All integers and floats are little-endian. The JSON header echoes the
//! backbone geometry, head sizes and, when known, the training config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use textalign_core::backbone::BackboneConfig;
use textalign_core::trainer::{Model, TrainConfig};
use textalign_core::Tensor;

use crate::error::{IoContext, LabError, Result};

pub const MAGIC: [u8; 4] = *b"TTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub d_txt: usize,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, train_config: Option<TrainConfig>, epoch: Option<usize>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                backbone: model.config.clone(),
                classes: model.classes(),
                d_txt: model.d_txt(),
                train_config,
                epoch,
            },
            model,
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ck.meta)?;
    let named = ck.model.named();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
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

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(LabError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabError::UnsupportedVersion {
            format: "TTCK",
            version,
        });
    }
    let meta_len = r.u32("header length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "header")?)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "tensor name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| LabError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor shape")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(LabError::Malformed(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(LabError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::<f32>::init(&meta.backbone, meta.classes, meta.d_txt, 0)?;
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(LabError::Malformed(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let (shape, data) = tensors
            .remove(name)
            .ok_or_else(|| LabError::Malformed(format!("missing tensor `{name}`")))?;
        if shape != slot.shape() {
            return Err(LabError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                found: shape,
            });
        }
        *slot = Tensor::new(&shape, data)?;
    }
    model.check()?;
    Ok(Checkpoint { meta, model })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ck)?).at(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            channels: 3,
        };
        Checkpoint::new(Model::init(&cfg, 3, 8, 5).unwrap(), None, Some(2))
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = small();
        assert_eq!(decode(&encode(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn corrupted_files() {
        let bytes = encode(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(decode(&bad), Err(LabError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(LabError::UnsupportedVersion { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(LabError::Truncated(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ck = small();
        ck.model.heads.cls_b = Tensor::zeros(&[4]);
        assert!(matches!(
            decode(&encode(&ck).unwrap()),
            Err(LabError::ShapeMismatch { .. })
        ));
    }
}
