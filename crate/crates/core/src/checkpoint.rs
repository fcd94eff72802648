//! `LITCKPT1` checkpoints: magic, u32 manifest length, JSON manifest, then
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LITCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    config: String,
    entries: Vec<Entry>,
}

/// Named f32 tensors plus the step counter and the run configuration text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.numel();
        }
        let manifest = Manifest { step: self.step, config: self.config.clone(), entries };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut b = Vec::with_capacity(12 + json.len() + offset);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if b.len() < 8 || &b[..8] != MAGIC {
            return Err(fmt(0, "bad magic, expected LITCKPT1".into()));
        }
        let len = b.get(8..12).ok_or_else(|| fmt(b.len(), "truncated manifest length".into()))?;
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let json = b.get(12..12 + len).ok_or_else(|| fmt(b.len(), format!("truncated manifest of {len} bytes")))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| fmt(12, format!("manifest: {e}")))?;
        let base = 12 + len;
        let payload = &b[base..];
        let mut tensors = Vec::with_capacity(m.entries.len());
        let mut expected = 0;
        for e in m.entries {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(fmt(base + e.offset, format!("entry `{}` is not contiguous", e.name)));
            }
            let bytes = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| fmt(b.len(), format!("truncated payload for `{}`", e.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            expected += 4 * n;
        }
        if payload.len() != expected {
            return Err(fmt(base + expected, format!("{} trailing bytes", payload.len() - expected)));
        }
        Ok(Self { step: m.step, config: m.config, tensors })
    }

    /// Atomic: a crash leaves either the previous file or the new one.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 17,
            config: "seed = 3\n".into(),
            tensors: vec![
                ("param/a".into(), Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 4.5, 5.0, 6.0]).unwrap()),
                ("adam.m/a".into(), Tensor::new(&[1], vec![1e-30]).unwrap()),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.litckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.config, c.config);
        assert_eq!(back.encode(), c.encode());
        assert_eq!(back.get("param/a").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(!dir.path().join("c.litckpt.tmp").exists());
    }

    #[test]
    fn corrupt_files_name_offsets() {
        let good = sample().encode();
        let off = |b: &[u8]| match Checkpoint::decode(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        let mut bad = good.clone();
        bad[3] = 0;
        assert_eq!(off(&bad), 0);
        assert_eq!(off(&good[..good.len() - 2]), good.len() as u64 - 2);
        let mut long = good.clone();
        long.extend_from_slice(&[0; 4]);
        assert_eq!(off(&long), good.len() as u64);
        let mut json = good;
        json[12] = b'#';
        assert_eq!(off(&json), 12);
    }
}
