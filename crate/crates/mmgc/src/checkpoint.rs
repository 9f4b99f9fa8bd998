//! Binary checkpoint container: named f32 tensors followed by a JSON
//! metadata trailer.
//!
//! Layout: magic `MMGCKPT1`, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 rank, u32 dims, and the f32 data, all
//! little-endian; the file ends with the JSON trailer whose byte length is
//! the final u32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MMGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Metadata trailer. The vocabulary travels with the checkpoint (as its
/// token list) alongside the dataset-relative path it was read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub vocab: Vec<String>,
    pub vocab_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshot of every parameter in the network, in store order.
    pub fn from_network<T: Scalar>(net: &Network<T>, meta: CheckpointMeta) -> Checkpoint {
        let tensors = net
            .store
            .entries()
            .map(|(_, e)| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { tensors, meta }
    }

    /// Rebuilds the architecture from the stored config and overwrites every
    /// parameter by name. Missing tensors or shape disagreements are a
    /// `ConfigMismatch`.
    pub fn into_network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net: Network<T> = Network::new(self.meta.config.clone(), self.meta.seed)?;
        self.restore_into(&mut net)?;
        Ok(net)
    }

    pub fn restore_into<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        if self.tensors.len() != net.store.len() {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "checkpoint has {} tensors, architecture has {}",
                    self.tensors.len(),
                    net.store.len()
                ),
            });
        }
        for t in &self.tensors {
            let Some((pid, entry)) = net.store.by_name(&t.name) else {
                return Err(Error::ConfigMismatch {
                    detail: format!("checkpoint tensor {} not in architecture", t.name),
                });
            };
            if entry.shape != t.shape {
                return Err(Error::ConfigMismatch {
                    detail: format!(
                        "tensor {}: checkpoint shape {:?} vs architecture {:?}",
                        t.name, t.shape, entry.shape
                    ),
                });
            }
            let data: Vec<T> = t.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            net.store.data_mut(pid).copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::format(format!("tensor {} exceeds format limits", t.name)));
            }
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::format(format!("metadata trailer: {e}")))?;
        buf.extend_from_slice(&trailer);
        buf.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let fail = |what: &str| Error::format(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("bad checkpoint magic"));
        }
        let mut pos = MAGIC.len();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let slice = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(slice)
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if tensors.iter().any(|t: &NamedTensor| t.name == name) {
                return Err(fail("duplicate tensor name"));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        if pos + 4 > bytes.len() {
            return Err(fail("missing trailer length"));
        }
        let trailer_len =
            u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()) as usize;
        if pos + trailer_len + 4 != bytes.len() {
            return Err(fail("trailer length does not match file size"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[pos..pos + trailer_len])
            .map_err(|e| fail(&format!("metadata trailer: {e}")))?;
        Ok(Checkpoint { tensors, meta })
    }
}
