//! Named-tensor container.
//!
//! Layout: the magic bytes `VGCK`, a little-endian `u64` header length, a
//! UTF-8 JSON header `[{"name", "dtype": "f32", "shape", "offset"}, ...]`,
//! then the raw little-endian payload. Offsets are byte offsets into the
//! payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VGCK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut header = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid("save_checkpoint", format!("duplicate tensor name {name:?}")));
        }
        header.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic (expected VGCK)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let hend = 12u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?
        as usize;
    let header: Vec<TensorEntry> = serde_json::from_slice(&bytes[12..hend])
        .map_err(|e| bad(format!("header JSON: {e}")))?;
    let payload = &bytes[hend..];
    let mut seen = HashSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
    let mut out = Vec::with_capacity(header.len());
    for e in &header {
        if !seen.insert(e.name.as_str()) {
            return Err(bad(format!("duplicate tensor name {:?}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(bad(format!("tensor {:?}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        let end = e.offset + 4 * numel;
        if end > payload.len() as u64 {
            return Err(bad(format!(
                "tensor {:?}: payload truncated (needs bytes {}..{end}, have {})",
                e.name,
                e.offset,
                payload.len()
            )));
        }
        spans.push((e.offset, end, e.name.as_str()));
        let raw = &payload[e.offset as usize..end as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("tensor {:?}: {err}", e.name)))?;
        out.push((e.name.clone(), t));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(bad(format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2)));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes, path)
}

/// Look up a tensor by name.
pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25)),
            ("b".into(), Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_lists_each_tensor_once() {
        let bytes = encode(&sample()).unwrap();
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: Vec<TensorEntry> = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        let names: Vec<&str> = header.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a.weight", "b"]);
        assert_eq!(header[1].offset, 24);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        let p = Path::new("mem");
        let truncated = &bytes[..bytes.len() - 1];
        let err = decode(truncated, p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        bytes[0] = b'X';
        assert!(decode(&bytes, p).unwrap_err().to_string().contains("magic"));
        let dup = vec![("x".to_string(), Tensor::zeros(&[1])), ("x".to_string(), Tensor::zeros(&[1]))];
        assert!(encode(&dup).is_err());
    }
}
