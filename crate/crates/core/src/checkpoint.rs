//! Parameter checkpoint file.
//!
//! Layout:
//!
//! ```text
//! RCM-CKPT-1\n
//! <u64 LE: manifest byte length>
//! <manifest: UTF-8 lines>
//!     meta\t<key>\t<value>
//!     tensor\t<name>\t<dim,dim,...>\t<byte offset into data section>
//! <data section: little-endian f64 buffers>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "RCM-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (expected header {MAGIC})")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// In-memory checkpoint: named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            tensors: store
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    (n.to_string(), t)
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint, checking shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let src = self
                .get(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor\t{name}\t{}\t{offset}\n", dims.join(",")));
            offset += t.len() * 8;
        }
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + manifest.len() + offset);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = format!("{MAGIC}\n");
        let rest = bytes
            .strip_prefix(header.as_bytes())
            .ok_or(CheckpointError::BadMagic)?;
        if rest.len() < 8 {
            return Err(CheckpointError::Corrupt("truncated manifest length".into()));
        }
        let mlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < mlen {
            return Err(CheckpointError::Corrupt("truncated manifest".into()));
        }
        let manifest = std::str::from_utf8(&rest[..mlen])
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let data = &rest[mlen..];

        let mut ckpt = Checkpoint::default();
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dims, offset] => {
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?
                    };
                    let offset: usize = offset
                        .parse()
                        .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
                    let n: usize = shape.iter().product();
                    let end = offset + n * 8;
                    if end > data.len() {
                        return Err(CheckpointError::Corrupt(format!(
                            "{name}: buffer extends past end of file"
                        )));
                    }
                    let values = data[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(shape, values)
                        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
                    ckpt.tensors.push((name.to_string(), t));
                }
                _ => {
                    return Err(CheckpointError::Corrupt(format!(
                        "unrecognised manifest line `{line}`"
                    )))
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
