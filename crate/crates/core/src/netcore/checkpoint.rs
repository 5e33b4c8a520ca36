//! Checkpoint container: magic, version, JSON metadata, named f32 parameter
//! records, and a trailing SHA-256 over everything before it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

use super::model::{DetectorModel, ModelConfig};
use super::tensor::Tensor;
use super::NetError;

const MAGIC: &[u8; 8] = b"SEMDETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: u64,
    /// Free-form provenance: dataset root or id the weights were trained on.
    pub dataset_id: String,
    pub master_seed: u64,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &DetectorModel<f32>,
    meta: &CheckpointMeta,
) -> Result<(), NetError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    let names = model.param_names();
    let params = model.params();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, tensor) in names.iter().zip(params) {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.shape().len() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read and integrity-check a checkpoint, returning metadata and raw named
/// tensors. Wrong magic/version and any truncation or checksum mismatch fail.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor<f32>)>), NetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(NetError::CorruptCheckpoint("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(NetError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(NetError::CorruptCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| NetError::CorruptCheckpoint(format!("metadata: {e}")))?;
    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| NetError::CorruptCheckpoint(format!("parameter name: {e}")))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name.clone(), Tensor::from_vec(&shape, data).map_err(|_| {
            NetError::CorruptCheckpoint(format!("parameter '{name}' shape/data mismatch"))
        })?));
    }
    if cur.pos != body.len() {
        return Err(NetError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok((meta, params))
}

impl DetectorModel<f32> {
    /// Restore exactly: the stored config is used as-is and every parameter
    /// must be present with its stored shape.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta), NetError> {
        let (meta, stored) = load_checkpoint(path)?;
        let mut model = DetectorModel::init(meta.model.clone(), meta.master_seed)?;
        let names = model.param_names();
        let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
            stored.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let tensor = lookup
                .get(name.as_str())
                .ok_or_else(|| NetError::MissingParam(name.clone()))?;
            if tensor.shape() != param.shape() {
                return Err(NetError::ShapeMismatch {
                    expected: format!("{name}: {:?}", param.shape()),
                    got: format!("{:?}", tensor.shape()),
                });
            }
            param.data_mut().copy_from_slice(tensor.data());
        }
        Ok((model, meta))
    }

    /// Warm-start a fresh model of `config`: parameters whose name and shape
    /// match the stored ones are copied, the rest keep their seed init.
    /// Returns the model and how many tensors were copied.
    pub fn init_from_checkpoint(
        config: ModelConfig,
        seed: u64,
        path: &Path,
    ) -> Result<(Self, usize), NetError> {
        let (_, stored) = load_checkpoint(path)?;
        let mut model = DetectorModel::init(config, seed)?;
        let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
            stored.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names = model.param_names();
        let mut copied = 0;
        for (name, param) in names.iter().zip(model.params_mut()) {
            if let Some(tensor) = lookup.get(name.as_str()) {
                if tensor.shape() == param.shape() {
                    param.data_mut().copy_from_slice(tensor.data());
                    copied += 1;
                }
            }
        }
        Ok((model, copied))
    }
}
