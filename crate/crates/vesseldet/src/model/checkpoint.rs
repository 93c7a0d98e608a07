//! Self-describing single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (model config, training metadata, tensor directory), then all tensor
//! data as little-endian f32. Loading rebuilds the model from the embedded
//! config and validates every tensor name and shape against it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"VSDCKPT1";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_f2: f64,
    pub best_conf_thresh: f64,
    /// Training configuration as recorded by the trainer (free-form JSON so
    /// the model layer does not depend on the trainer's types).
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// offset into the data blob, in f32 units
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let named = model.graph.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    let mut blob: Vec<f32> = Vec::new();
    for (name, shape, data) in named {
        entries.push(TensorEntry {
            name,
            shape,
            offset: blob.len(),
            len: data.len(),
        });
        blob.extend_from_slice(&data);
    }
    let header = Header {
        model_config: model.cfg.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;

    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(ModelError::Checkpoint("truncated tensor data".into()));
    }
    let blob: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let end = e.offset + e.len;
        if end > blob.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{}` extends past end of data",
                e.name
            )));
        }
        if e.shape.iter().product::<usize>() != e.len {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{}` shape {:?} does not match length {}",
                e.name, e.shape, e.len
            )));
        }
        tensors.insert(e.name.clone(), (e.shape.clone(), blob[e.offset..end].to_vec()));
    }

    let mut model = Model::new(header.model_config, 0)?;
    model
        .graph
        .load_named_tensors(&tensors)
        .map_err(ModelError::Checkpoint)?;
    Ok((model, header.meta))
}
