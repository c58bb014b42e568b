//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "EKD1" | format version u32 | entry count u32
//!   then per tensor:
//!   name length u32 | UTF-8 name | dtype code u8 | rank u8
//!   | dims (rank x u32) | raw element bytes
//!
//! Element bytes are the IEEE-754 bit patterns, so a write/read cycle is
//! bit-exact. A JSON sidecar (same path, `.json` extension) carries the
//! architecture needed to rebuild the model plus the epoch it was saved at.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};
use crate::nn::{backbone_load_named_tensors, backbone_named_tensors, Backbone, BackboneSpec, Stream};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EKD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full stream: backbone plus guided modules.
    Stream,
    /// Exported main network only.
    Backbone,
}

/// Sidecar metadata stored next to the binary tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub epoch: u32,
    pub backbone: BackboneSpec,
    pub guided_pairs: usize,
    pub num_params: usize,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn write_tensors<E: Scalar>(path: &Path, entries: &[(String, &Tensor<E>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(E::DTYPE.code());
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf).map_err(EkdError::io(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(EkdError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_tensors<E: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<E>)>> {
    let bytes = fs::read(path).map_err(EkdError::io(path))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(EkdError::Checkpoint("bad magic, not an EKD1 file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(EkdError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(EkdError::Checkpoint("unreasonable tensor name length".into()));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| EkdError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| EkdError::Checkpoint(format!("unknown dtype in {name}")))?;
        if dtype != E::DTYPE {
            return Err(EkdError::Checkpoint(format!(
                "tensor {name} has dtype {dtype:?}, expected {:?}",
                E::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        if rank > 8 {
            return Err(EkdError::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = dtype.byte_width();
        let raw = r.take(numel * width)?;
        let data: Vec<E> = raw.chunks_exact(width).map(E::read_le).collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(EkdError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

fn write_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| EkdError::Checkpoint(format!("meta encode: {e}")))?;
    fs::write(meta_path(path), json).map_err(EkdError::io(meta_path(path)))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let json = fs::read_to_string(&mp).map_err(EkdError::io(&mp))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| EkdError::Checkpoint(format!("meta parse: {e}")))?;
    if meta.format != "ekd-checkpoint" || meta.version != FORMAT_VERSION {
        return Err(EkdError::Checkpoint(format!(
            "unsupported checkpoint meta {}/{}",
            meta.format, meta.version
        )));
    }
    Ok(meta)
}

pub fn save_stream(path: &Path, stream: &Stream<f32>, epoch: u32) -> Result<()> {
    write_tensors(path, &stream.named_tensors())?;
    write_meta(
        path,
        &CheckpointMeta {
            format: "ekd-checkpoint".into(),
            version: FORMAT_VERSION,
            kind: CheckpointKind::Stream,
            epoch,
            backbone: stream.backbone.spec.clone(),
            guided_pairs: stream.guided.len(),
            num_params: stream.param_count(),
        },
    )
}

pub fn load_stream(path: &Path) -> Result<(Stream<f32>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if meta.kind != CheckpointKind::Stream {
        return Err(EkdError::Checkpoint(
            "checkpoint holds a backbone export, not a full stream".into(),
        ));
    }
    let mut stream = Stream::build(&meta.backbone, meta.guided_pairs, 0)?;
    let entries = read_tensors::<f32>(path)?;
    stream.load_named_tensors(&entries)?;
    Ok((stream, meta))
}

pub fn save_backbone(path: &Path, backbone: &Backbone<f32>, epoch: u32) -> Result<()> {
    write_tensors(path, &backbone_named_tensors(backbone))?;
    write_meta(
        path,
        &CheckpointMeta {
            format: "ekd-checkpoint".into(),
            version: FORMAT_VERSION,
            kind: CheckpointKind::Backbone,
            epoch,
            backbone: backbone.spec.clone(),
            guided_pairs: 0,
            num_params: backbone.param_count(),
        },
    )
}

pub fn load_backbone(path: &Path) -> Result<(Backbone<f32>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let mut backbone = Backbone::build(&meta.backbone, 0)?;
    match meta.kind {
        CheckpointKind::Backbone => {
            let entries = read_tensors::<f32>(path)?;
            backbone_load_named_tensors(&mut backbone, &entries)?;
        }
        CheckpointKind::Stream => {
            // A full stream checkpoint also contains the backbone; load it
            // and drop the guided tensors.
            let (stream, _) = load_stream(path)?;
            backbone = stream.backbone;
        }
    }
    Ok((backbone, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ekd1");
        let a = Tensor::from_vec(vec![2, 3], vec![1.0f32, -0.0, 0.5, f32::MIN_POSITIVE, 3.25, -7.5])
            .unwrap();
        let b = Tensor::scalar(42.0f32);
        write_tensors(&path, &[("a".into(), &a), ("scalar.b".into(), &b)]).unwrap();
        let back = read_tensors::<f32>(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bit_eq(&a));
        assert!(back[1].1.bit_eq(&b));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ekd1");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_tensors::<f32>(&path).is_err());

        let good = dir.path().join("good.ekd1");
        let t = Tensor::from_vec(vec![4], vec![1.0f32; 4]).unwrap();
        write_tensors(&good, &[("x".into(), &t)]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_tensors::<f32>(&good).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ekd1");
        let t = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        write_tensors(&path, &[("x".into(), &t)]).unwrap();
        assert!(read_tensors::<f32>(&path).is_err());
        assert!(read_tensors::<f64>(&path).is_ok());
    }
}
