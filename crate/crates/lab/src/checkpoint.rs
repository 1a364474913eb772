//! Model checkpoints: an 8-byte little-endian header length, a JSON header
//! describing the model and every tensor, then the raw f32 little-endian
//! tensor data.

use std::path::Path;

use addlab_core::models::{Model, ModelConfig};
use addlab_core::vocab::{Vocabulary, VocabularyFile};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const FORMAT: &str = "addlab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub model: ModelConfig,
    pub vocab: VocabularyFile,
    pub vocab_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn vocab_hash(vocab: &VocabularyFile) -> String {
    fsutil::sha256_hex(&serde_json::to_vec(vocab).expect("serializable vocab"))
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: data.len() as u64,
            len: p.value.len() as u64,
        });
        for x in p.value.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let vocab = model.vocab().to_file();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        model: model.config(),
        vocab_sha256: vocab_hash(&vocab),
        vocab,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &to_bytes(model))
}

pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, &[u8]), String> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or("truncated header length")?.try_into().unwrap();
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| "header length overflows")?;
    let header_bytes = bytes.get(8..8usize.saturating_add(len)).ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| format!("bad header: {e}"))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(format!("unsupported format {} v{}", header.format, header.version));
    }
    if header.dtype != "f32" || header.endianness != "little" {
        return Err(format!("unsupported dtype {} ({})", header.dtype, header.endianness));
    }
    if vocab_hash(&header.vocab) != header.vocab_sha256 {
        return Err("vocabulary hash mismatch".into());
    }
    Ok((header, &bytes[8 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Model, String> {
    let (header, data) = read_header(bytes)?;
    let vocab = Vocabulary::from_file(header.vocab.clone()).map_err(|e| e.to_string())?;
    let mut model = Model::new(&header.model, vocab, 0).map_err(|e| e.to_string())?;
    if header.tensors.len() != model.params().len() {
        return Err(format!("{} tensors, model has {}", header.tensors.len(), model.params().len()));
    }
    let store = model.params_mut();
    for t in &header.tensors {
        let id = store.find(&t.name).ok_or_else(|| format!("unknown tensor {}", t.name))?;
        let param = store.get_mut(id);
        if param.value.shape() != t.shape.as_slice() || param.value.len() as u64 != t.len {
            return Err(format!("tensor {} has shape {:?}, expected {:?}", t.name, t.shape, param.value.shape()));
        }
        let start = usize::try_from(t.offset).map_err(|_| "offset overflows")?;
        let end = start.checked_add(param.value.len() * 4).ok_or("offset overflows")?;
        let raw = data.get(start..end).ok_or_else(|| format!("tensor {} runs past the data section", t.name))?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(LabError::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(LabError::io(path))?;
    from_bytes(&bytes).map_err(|m| LabError::format(path, m))
}
