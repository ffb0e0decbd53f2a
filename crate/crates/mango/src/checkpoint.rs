//! On-disk container for models, datasets, and other tensor bundles.
//!
//! Layout: 4-byte magic "MNGO", u32 LE format version, u64 LE header length,
//! JSON header, then raw little-endian f64 payloads. The header records a
//! free-form JSON `meta` object and, per tensor, its name, shape, and offset
//! (in elements) into the payload. Model checkpoints store the model spec and
//! init seed in `meta`; loading rebuilds the model from those and then
//! overwrites every parameter by name, so a save/load round trip is bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MangoError, Result};
use crate::flow::{FlowModel, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MNGO";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named bundle of tensors plus a JSON metadata object.
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| MangoError::Format {
            offset: 0,
            detail: format!("header encode: {e}"),
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, 0, "magic")?;
        if magic != MAGIC {
            return Err(MangoError::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let mut v4 = [0u8; 4];
        read_exact_at(&mut r, &mut v4, 4, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(MangoError::Format {
                offset: 4,
                detail: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let mut l8 = [0u8; 8];
        read_exact_at(&mut r, &mut l8, 8, "header length")?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbuf = vec![0u8; hlen];
        read_exact_at(&mut r, &mut hbuf, 16, "header")?;
        let header: Header = serde_json::from_slice(&hbuf).map_err(|e| MangoError::Format {
            offset: 16,
            detail: format!("header decode: {e}"),
        })?;
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let mut payload = vec![0u8; total * 8];
        read_exact_at(&mut r, &mut payload, 16 + hlen as u64, "payload")?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + len * 8;
            if end > payload.len() {
                return Err(MangoError::Format {
                    offset: 16 + hlen as u64 + start as u64,
                    detail: format!("tensor {:?} extends past payload", e.name),
                });
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| MangoError::Format {
        offset,
        detail: format!("truncated file while reading {what}"),
    })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    spec: ModelSpec,
    init_seed: u64,
}

pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        kind: "flow_model".into(),
        spec: model.spec.clone(),
        init_seed: model.init_seed,
    })
    .expect("model meta serializes");
    let tensors = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    Container { meta, tensors }.write(path)
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    let c = Container::read(path)?;
    let meta: ModelMeta = serde_json::from_value(c.meta.clone()).map_err(|e| MangoError::Format {
        offset: 16,
        detail: format!("model meta: {e}"),
    })?;
    if meta.kind != "flow_model" {
        return Err(MangoError::Format {
            offset: 16,
            detail: format!("expected a flow_model checkpoint, found kind {:?}", meta.kind),
        });
    }
    let mut model = FlowModel::build(meta.spec, meta.init_seed)?;
    let stored: std::collections::HashMap<&str, &Tensor> =
        c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in model.params_mut() {
        let t = stored.get(p.name.as_str()).ok_or_else(|| MangoError::Format {
            offset: 16,
            detail: format!("checkpoint is missing parameter {:?}", p.name),
        })?;
        if t.shape() != p.value.shape() {
            return Err(MangoError::Format {
                offset: 16,
                detail: format!(
                    "parameter {:?} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = (*t).clone();
    }
    Ok(model)
}
