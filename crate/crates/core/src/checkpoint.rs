//! Tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DPCKPT01"
//! header_len u32      followed by that many bytes of UTF-8 JSON
//! n_tensors  u32
//! directory  n_tensors x { name_len u32, name, ndim u32, dims u64 x ndim, offset u64 }
//! data       f32 values; `offset` counts values from the start of this block
//! ```

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::SchemeKind;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelParameters, Parameters, Tensor};

pub const MAGIC: &[u8; 8] = b"DPCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Raw JSON header, kept verbatim so re-encoding is byte-exact.
    pub header: String,
    pub tensors: Vec<StoredTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| t.values.len()).sum();
        let mut out = Vec::with_capacity(64 + self.header.len() + total * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.values.len() as u64;
        }
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Data("checkpoint header is not UTF-8".into()))?
            .to_string();
        let n = r.u32()? as usize;
        let mut dir = Vec::with_capacity(n);
        let mut expected_offset = 0u64;
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            if offset != expected_offset {
                return Err(Error::Data(format!("tensor {name} has non-contiguous offset {offset}")));
            }
            expected_offset += shape.iter().product::<usize>() as u64;
            dir.push((name, shape));
        }
        let data_start = r.at;
        let mut tensors = Vec::with_capacity(n);
        for (name, shape) in dir {
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(StoredTensor { name, shape, values });
        }
        if r.at != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after tensor data starting at {data_start}",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_parameters<P: Parameters, H: Serialize>(params: &P, header: &H) -> Self {
        let header = serde_json::to_string(header).expect("header serialises");
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| StoredTensor {
                name,
                shape: t.shape.clone(),
                values: t.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint { header, tensors }
    }

    pub fn parse_header<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_str(&self.header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor)> {
        self.tensors
            .into_iter()
            .map(|t| {
                (
                    t.name,
                    Tensor {
                        shape: t.shape,
                        data: t.values.into_iter().map(f64::from).collect(),
                    },
                )
            })
            .collect()
    }
}

/// Header of a single-model checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub config: EncoderConfig,
    pub scheme: SchemeKind,
    pub class_weighted: bool,
}

impl ModelHeader {
    pub const KIND: &'static str = "model";

    pub fn new(config: EncoderConfig, scheme: SchemeKind, class_weighted: bool) -> Self {
        ModelHeader {
            kind: Self::KIND.into(),
            config,
            scheme,
            class_weighted,
        }
    }
}

pub fn save_model(path: &Path, params: &ModelParameters, header: &ModelHeader) -> Result<()> {
    Checkpoint::from_parameters(params, header).save(path)
}

pub fn load_model(path: &Path) -> Result<(ModelParameters, ModelHeader)> {
    let ckpt = Checkpoint::load(path)?;
    let header: ModelHeader = ckpt.parse_header()?;
    if header.kind != ModelHeader::KIND {
        return Err(Error::Data(format!("{}: expected a model checkpoint, found {:?}", path.display(), header.kind)));
    }
    let params = ModelParameters::from_tensors(&header.config, ckpt.into_tensors())?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, HeadKind};

    #[test]
    fn model_round_trip_is_byte_exact() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            max_len: 12,
            vocab_size: 20,
            head_kind: HeadKind::Attn,
            n_classes: 14,
            seed: 9,
        };
        let params = init_params(&cfg).unwrap();
        let header = ModelHeader::new(cfg, SchemeKind::Markers, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &params, &header).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);

        let (loaded, h) = load_model(&path).unwrap();
        assert_eq!(h, header);
        let mut rounded = params.clone();
        rounded.round_to_f32();
        assert_eq!(loaded, rounded);
        let again = dir.path().join("again.ckpt");
        save_model(&again, &loaded, &h).unwrap();
        assert_eq!(fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let ck = Checkpoint {
            header: "{}".into(),
            tensors: vec![StoredTensor {
                name: "x".into(),
                shape: vec![2],
                values: vec![1.0, 2.0],
            }],
        };
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }
}
