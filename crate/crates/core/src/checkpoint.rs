//! PSET1 checkpoint container.
//!
//! Layout:
//!
//! ```text
//! bytes 0..6   b"PSET1\n"
//! bytes 6..10  header length H, u32 little-endian
//! next H bytes UTF-8 JSON: {"entries":[{"name","shape","offset","len"}],"dtype":"f64","version":1}
//! remainder    concatenated little-endian f64 payload
//! ```
//!
//! `offset` and `len` count elements, not bytes; entries are contiguous and
//! in set order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 6] = b"PSET1\n";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub entries: Vec<EntryHeader>,
    pub dtype: String,
    pub version: u32,
}

impl Header {
    fn for_set(p: &ParameterSet) -> Self {
        let mut offset = 0;
        let entries = p
            .tensors()
            .iter()
            .map(|t| {
                let e = EntryHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.numel(),
                };
                offset += t.numel();
                e
            })
            .collect();
        Self {
            entries,
            dtype: DTYPE.to_string(),
            version: VERSION,
        }
    }

    fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }
}

pub fn encode(p: &ParameterSet) -> Vec<u8> {
    let header = serde_json::to_vec(&Header::for_set(p)).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 8 * p.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in p.tensors() {
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses only the magic and JSON header.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let len_start = MAGIC.len();
    let len_bytes: [u8; 4] = bytes
        .get(len_start..len_start + 4)
        .ok_or_else(|| Error::Format("truncated header length".into()))?
        .try_into()
        .expect("slice of length 4");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_start = len_start + 4;
    let header_bytes = bytes
        .get(header_start..header_start + header_len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("invalid header JSON: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported dtype '{}'",
            header.dtype
        )));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut expected = 0;
    for e in &header.entries {
        if e.offset != expected {
            return Err(Error::Format(format!(
                "entry '{}' offset {} is not contiguous (expected {expected})",
                e.name, e.offset
            )));
        }
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!(
                "entry '{}' shape {:?} does not match len {}",
                e.name, e.shape, e.len
            )));
        }
        expected += e.len;
    }
    Ok((header, header_start + header_len))
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    let (header, payload_start) = decode_header(bytes)?;
    let payload = &bytes[payload_start..];
    let total = header.total_len();
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header describes {} f64 values",
            payload.len(),
            total
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let tensors = header
        .entries
        .into_iter()
        .map(|e| {
            let data: Vec<f64> = values.by_ref().take(e.len).collect();
            Tensor::new(e.name, e.shape, data)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    ParameterSet::new(tensors).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(p: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterSet {
        ParameterSet::new(vec![
            Tensor::new("w", vec![3], vec![1e-300, -0.0, f64::MAX]).unwrap(),
            Tensor::new("b", vec![2, 1], vec![f64::MIN_POSITIVE, -f64::MAX]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn empty_set_roundtrips() {
        let p = ParameterSet::empty();
        assert!(decode(&encode(&p)).unwrap().bit_eq(&p));
    }

    #[test]
    fn extreme_values_roundtrip_bitwise() {
        let p = sample();
        let q = decode(&encode(&p)).unwrap();
        assert!(q.bit_eq(&p));
        assert!(q.data(0)[1].is_sign_negative());
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..6], b"PSET1\n");
        let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[10..10 + h]).unwrap();
        assert_eq!(
            json,
            r#"{"entries":[{"name":"w","shape":[3],"offset":0,"len":3},{"name":"b","shape":[2,1],"offset":3,"len":2}],"dtype":"f64","version":1}"#
        );
        assert_eq!(bytes.len(), 10 + h + 5 * 8);
        assert_eq!(&bytes[10 + h..10 + h + 8], &1e-300f64.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode(&bytes[..8]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn non_contiguous_offsets_are_rejected() {
        let header = r#"{"entries":[{"name":"w","shape":[1],"offset":1,"len":1}],"dtype":"f64","version":1}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pset");
        save_checkpoint(&sample(), &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&sample()));
        assert!(matches!(
            load_checkpoint(dir.path().join("missing.pset")),
            Err(Error::Io { .. })
        ));
    }

    fn arb_set() -> impl Strategy<Value = ParameterSet> {
        prop::collection::vec((prop::collection::vec(1usize..4, 1..3), any::<u64>()), 0..5)
            .prop_map(|specs| {
                let tensors = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (shape, bits))| {
                        let n: usize = shape.iter().product();
                        let data = (0..n as u64)
                            .map(|k| f64::from_bits(bits.wrapping_mul(k + 1).rotate_left(k as u32)))
                            .collect();
                        Tensor::new(format!("t{i}"), shape, data).unwrap()
                    })
                    .collect();
                ParameterSet::new(tensors).unwrap()
            })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(p in arb_set()) {
            prop_assert!(decode(&encode(&p)).unwrap().bit_eq(&p));
        }
    }
}
