//! Binary tensor container.
//!
//! Layout: the 8-byte magic `GLEAKv1\n`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"entries": [{name, shape, byte_offset}]}`,
//! then the payload of little-endian `f64` values. Offsets are relative to
//! the start of the payload and entries are stored back to back in header
//! order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, IoError};
use crate::network::{Architecture, GradientCapture, LayerGradients, Parameters};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 8] = b"GLEAKv1\n";

pub type TensorEntry = (String, Tensor);

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

pub fn encode_tensor_container(entries: &[TensorEntry]) -> Result<Vec<u8>, IoError> {
    let mut seen = HashSet::new();
    let mut header = Header {
        entries: Vec::with_capacity(entries.len()),
    };
    let mut offset = 0u64;
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(IoError::Container(format!("duplicate entry name {name:?}")));
        }
        header.entries.push(HeaderEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += 8 * t.len() as u64;
    }
    let json = serde_json::to_vec(&header).map_err(|e| IoError::Container(e.to_string()))?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| IoError::Container("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensor_container(bytes: &[u8]) -> Result<Vec<TensorEntry>, IoError> {
    if bytes.len() < 8 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(IoError::Container("bad magic (expected GLEAKv1)".into()));
    }
    let Some(len_bytes) = bytes.get(8..12) else {
        return Err(IoError::Container(format!(
            "truncated at byte {}: header length missing",
            bytes.len()
        )));
    };
    let header_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let payload_start = 12usize.saturating_add(header_len);
    let Some(json) = bytes.get(12..payload_start) else {
        return Err(IoError::Container(format!(
            "truncated at byte {}: header needs {header_len} bytes from byte 12",
            bytes.len()
        )));
    };
    let header: Header =
        serde_json::from_slice(json).map_err(|e| IoError::Container(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut seen = HashSet::new();
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        if !seen.insert(e.name.clone()) {
            return Err(IoError::Container(format!(
                "duplicate entry name {:?}",
                e.name
            )));
        }
        if e.byte_offset != expected {
            return Err(IoError::Container(format!(
                "entry {:?} starts at payload byte {} but the previous entry ends at {expected}",
                e.name, e.byte_offset
            )));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| IoError::Container(format!("entry {:?}: shape overflows", e.name)))?;
        let end = expected
            .checked_add(count)
            .ok_or_else(|| IoError::Container(format!("entry {:?}: size overflows", e.name)))?;
        if end > payload.len() as u64 {
            return Err(IoError::Container(format!(
                "truncated at byte {}: entry {:?} needs bytes {}..{}",
                bytes.len(),
                e.name,
                payload_start as u64 + expected,
                payload_start as u64 + end
            )));
        }
        let data: Vec<f64> = payload[expected as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(e.shape, data)
            .map_err(|err| IoError::Container(format!("entry {:?}: {err}", e.name)))?;
        out.push((e.name, tensor));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(IoError::Container(format!(
            "{} trailing bytes after the last entry",
            payload.len() as u64 - expected
        )));
    }
    Ok(out)
}

pub fn write_tensor_container(path: &Path, entries: &[TensorEntry]) -> Result<(), IoError> {
    write_file(path, &encode_tensor_container(entries)?)
}

pub fn read_tensor_container(path: &Path) -> Result<Vec<TensorEntry>, IoError> {
    decode_tensor_container(&read_file(path)?)
        .map_err(|e| IoError::Container(format!("{}: {e}", path.display())))
}

fn take(entries: &[TensorEntry], name: &str) -> Result<Tensor, IoError> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| IoError::Container(format!("missing entry {name:?}")))
}

pub fn params_to_entries(params: &Parameters) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for (i, l) in params.conv.iter().enumerate() {
        out.push((format!("conv{}.weight", i + 1), l.kernels.clone()));
        out.push((format!("conv{}.bias", i + 1), l.bias.clone()));
    }
    out.push(("fc.weight".into(), params.fc.weight.clone()));
    out.push(("fc.bias".into(), params.fc.bias.clone()));
    out
}

pub fn params_from_entries(
    arch: &Architecture,
    entries: &[TensorEntry],
) -> Result<Parameters, IoError> {
    let mut params = Parameters::zeros(arch);
    for (i, l) in params.conv.iter_mut().enumerate() {
        l.kernels = take(entries, &format!("conv{}.weight", i + 1))?;
        l.bias = take(entries, &format!("conv{}.bias", i + 1))?;
    }
    params.fc.weight = take(entries, "fc.weight")?;
    params.fc.bias = take(entries, "fc.bias")?;
    params.validate(arch)?;
    Ok(params)
}

pub fn capture_to_entries(capture: &GradientCapture) -> Vec<TensorEntry> {
    let mut out = vec![(
        "batch_size".to_string(),
        Tensor::full(&[1], capture.batch_size as f64),
    )];
    for (i, l) in capture.conv.iter().enumerate() {
        out.push((format!("conv{}.grad_w", i + 1), l.grad_w.clone()));
        out.push((format!("conv{}.grad_b", i + 1), l.grad_b.clone()));
    }
    out.push(("fc.grad_w".into(), capture.fc.grad_w.clone()));
    out.push(("fc.grad_b".into(), capture.fc.grad_b.clone()));
    out
}

pub fn capture_from_entries(
    arch: &Architecture,
    entries: &[TensorEntry],
) -> Result<GradientCapture, IoError> {
    let b = take(entries, "batch_size")?;
    let batch_size = match b.data() {
        [v] if *v >= 1.0 && v.fract() == 0.0 && *v <= u32::MAX as f64 => *v as usize,
        other => {
            return Err(IoError::Container(format!(
                "batch_size must be one positive integer, got {other:?}"
            )))
        }
    };
    let conv = (1..=arch.conv_layers.len())
        .map(|i| {
            Ok(LayerGradients {
                grad_w: take(entries, &format!("conv{i}.grad_w"))?,
                grad_b: take(entries, &format!("conv{i}.grad_b"))?,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let capture = GradientCapture {
        batch_size,
        conv,
        fc: LayerGradients {
            grad_w: take(entries, "fc.grad_w")?,
            grad_b: take(entries, "fc.grad_b")?,
        },
    };
    capture.validate(arch)?;
    Ok(capture)
}
