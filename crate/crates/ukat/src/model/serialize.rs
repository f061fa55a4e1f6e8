//! Model file format.
//!
//! ```text
//! bytes 0..4    magic "UKAT"
//! bytes 4..8    format version, u32 little endian
//! bytes 8..12   header length H, u32 little endian
//! bytes 12..12+H  JSON header: architecture, front-end config, vocabulary,
//!                 tensor manifest (name, shape, data offset)
//! bytes 12+H..  tensor payload, raw f32 little endian, no padding
//! ```
//!
//! Manifest offsets are relative to the payload start. The writer lays
//! tensors out contiguously in canonical traversal order; the reader is
//! name-driven and accepts any layout that stays in bounds and covers every
//! tensor exactly. Save and load round-trip byte-identically.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::FrontendConfig;
use crate::error::{Error, Result};
use crate::labels::LabelVocabulary;

use super::net::{zeroed_parameters, ArchitectureConfig};
use super::Model;

const MAGIC: [u8; 4] = *b"UKAT";
const FORMAT_VERSION: u32 = 1;
const HEADER_START: u64 = 12;

#[derive(Serialize, Deserialize)]
struct VocabSection {
    at: Vec<String>,
    kws: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    arch: ArchitectureConfig,
    frontend: FrontendConfig,
    vocabulary: VocabSection,
    tensors: Vec<TensorRecord>,
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    m.params.visit(&mut |name, t, _| {
        records.push(TensorRecord {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });

    let header = FileHeader {
        arch: m.params.config().clone(),
        frontend: m.frontend.clone(),
        vocabulary: VocabSection {
            at: m.vocab.at_labels().to_vec(),
            kws: m.vocab.kws_labels().to_vec(),
        },
        tensors: records,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Encoding(format!("model header serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(12 + header_bytes.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(bytes.len() as u64, "file ends before the fixed header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"UKAT\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = 12 + header_len;
    if data_start > bytes.len() {
        return Err(format_err(
            8,
            format!("header length {header_len} runs past the {} byte file", bytes.len()),
        ));
    }
    let header: FileHeader = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| format_err(HEADER_START, format!("malformed header: {e}")))?;

    header.arch.validate()?;
    header.frontend.validate()?;
    let vocab = LabelVocabulary::new(header.vocabulary.at, header.vocabulary.kws)?;
    if header.arch.n_labels != vocab.len() {
        return Err(format_err(
            HEADER_START,
            format!(
                "architecture declares {} labels but the vocabulary holds {}",
                header.arch.n_labels,
                vocab.len()
            ),
        ));
    }

    let mut by_name: HashMap<&str, &TensorRecord> = HashMap::new();
    for rec in &header.tensors {
        if by_name.insert(rec.name.as_str(), rec).is_some() {
            return Err(format_err(HEADER_START, format!("duplicate tensor record {:?}", rec.name)));
        }
    }

    let data = &bytes[data_start..];
    let mut params = zeroed_parameters(&header.arch)?;
    let mut fill_err: Option<Error> = None;
    let mut consumed_end = 0u64;
    params.visit_mut(&mut |name, t, _| {
        if fill_err.is_some() {
            return;
        }
        let Some(rec) = by_name.remove(name.as_str()) else {
            fill_err = Some(format_err(HEADER_START, format!("missing tensor {name:?}")));
            return;
        };
        if rec.shape != t.shape() {
            fill_err = Some(format_err(
                data_start as u64 + rec.offset,
                format!("tensor {name:?} has shape {:?}, expected {:?}", rec.shape, t.shape()),
            ));
            return;
        }
        let n_bytes = t.numel() as u64 * 4;
        let end = rec.offset + n_bytes;
        if end > data.len() as u64 {
            fill_err = Some(format_err(
                data_start as u64 + rec.offset,
                format!("tensor {name:?} payload runs past end of file"),
            ));
            return;
        }
        consumed_end = consumed_end.max(end);
        let src = &data[rec.offset as usize..end as usize];
        for (i, (dst, chunk)) in t.data_mut().iter_mut().zip(src.chunks_exact(4)).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                fill_err = Some(format_err(
                    data_start as u64 + rec.offset + i as u64 * 4,
                    format!("non-finite value in tensor {name:?}"),
                ));
                return;
            }
            *dst = v;
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(rec) = by_name.values().next() {
        return Err(format_err(
            HEADER_START,
            format!("unknown tensor record {:?}", rec.name),
        ));
    }
    if (data.len() as u64) != consumed_end {
        return Err(format_err(
            data_start as u64 + consumed_end,
            format!(
                "payload holds {} bytes but tensors account for {consumed_end}",
                data.len()
            ),
        ));
    }

    Ok(Model {
        params,
        vocab,
        frontend: header.frontend,
    })
}

/// Parsed JSON header plus the format version, for inspection tooling.
pub fn read_header_value(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || bytes[0..4] != MAGIC {
        return Err(format_err(0, "not a model file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(format_err(8, "header length runs past end of file"));
    }
    let mut value: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| format_err(HEADER_START, format!("malformed header: {e}")))?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("format_version".to_string(), version.into());
    }
    Ok(value)
}
