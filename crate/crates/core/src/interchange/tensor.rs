use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EmbeddingGrid;

pub const TENSOR_MAGIC: &[u8; 8] = b"ACTENSR1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub layout: String,
}

/// Serializes a grid as `magic | u32 header length | JSON header | f32 LE payload`.
pub fn encode_tensor_archive(grid: &EmbeddingGrid) -> Result<Vec<u8>> {
    if let Some(index) = grid.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (h, w, d) = grid.shape();
    let header = TensorHeader {
        shape: vec![h, w, d],
        dtype: "f32".into(),
        layout: "row-major".into(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + grid.values().len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor_archive(bytes: &[u8]) -> Result<EmbeddingGrid> {
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::Format("missing ACTENSR1 magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or(Error::Truncated {
            expected: 12 + header_len,
            found: bytes.len(),
        })?;
    let header: TensorHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Format(format!("bad tensor header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.layout != "row-major" {
        return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
    }
    let [h, w, d] = header.shape[..] else {
        return Err(Error::Format(format!(
            "embedding archives must have rank 3, got shape {:?}",
            header.shape
        )));
    };
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::Format(format!("non-positive shape {:?}", header.shape)));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("shape {:?} overflows", header.shape)))?;
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingGrid::new(h, w, d, values)
}

pub fn write_tensor_archive(grid: &EmbeddingGrid, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    let bytes = encode_tensor_archive(grid)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_archive(source: impl AsRef<Path>) -> Result<EmbeddingGrid> {
    let path = source.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor_archive(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header_len(bytes: &[u8]) -> usize {
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize
    }

    #[test]
    fn zero_grid_layout() {
        let grid = EmbeddingGrid::new(1, 1, 4, vec![0.0; 4]).unwrap();
        let bytes = encode_tensor_archive(&grid).unwrap();
        assert_eq!(&bytes[..8], b"ACTENSR1");
        let hl = header_len(&bytes);
        assert_eq!(bytes.len(), 8 + 4 + hl + 16);
        assert!(bytes[12 + hl..].iter().all(|&b| b == 0));
        let header: TensorHeader = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header.shape, vec![1, 1, 4]);
        assert_eq!(header.dtype, "f32");
        assert_eq!(header.layout, "row-major");
    }

    #[test]
    fn payload_offsets_follow_row_major_index() {
        let (h, w, d) = (2usize, 3usize, 2usize);
        // enumerate every position, mark it, and locate the marked scalar
        for r in 0..h {
            for c in 0..w {
                for k in 0..d {
                    let grid = EmbeddingGrid::from_fn(h, w, d, |rr, cc, kk| {
                        if (rr, cc, kk) == (r, c, k) { 7.0 } else { 0.0 }
                    })
                    .unwrap();
                    let bytes = encode_tensor_archive(&grid).unwrap();
                    let payload = &bytes[12 + header_len(&bytes)..];
                    let found = payload
                        .chunks_exact(4)
                        .position(|s| f32::from_le_bytes(s.try_into().unwrap()) == 7.0)
                        .unwrap();
                    assert_eq!(found * 4, ((r * w + c) * d + k) * 4);
                }
            }
        }
        let grid = EmbeddingGrid::from_fn(2, 3, 2, |r, c, k| if (r, c, k) == (1, 2, 1) { 7.0 } else { 0.0 }).unwrap();
        let bytes = encode_tensor_archive(&grid).unwrap();
        let payload = &bytes[12 + header_len(&bytes)..];
        assert_eq!(f32::from_le_bytes(payload[44..48].try_into().unwrap()), 7.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = EmbeddingGrid::new(2, 2, 2, vec![1.5; 8]).unwrap();
        let mut bytes = encode_tensor_archive(&grid).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let err = decode_tensor_archive(&wrong_magic).unwrap_err();
        assert!(err.to_string().contains("format"), "{err}");

        bytes.truncate(bytes.len() - 3);
        let err = decode_tensor_archive(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let header = br#"{"shape":[1,1,1],"dtype":"f16","layout":"row-major"}"#;
        let mut f16 = TENSOR_MAGIC.to_vec();
        f16.extend_from_slice(&(header.len() as u32).to_le_bytes());
        f16.extend_from_slice(header);
        f16.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_tensor_archive(&f16), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.actensr");
        let grid = EmbeddingGrid::from_fn(4, 4, 8, |r, c, k| (r as f32 - c as f32) * 0.37 + k as f32).unwrap();
        write_tensor_archive(&grid, &path).unwrap();
        assert_eq!(read_tensor_archive(&path).unwrap(), grid);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_is_bit_exact(
            (h, w, d, values) in (1usize..5, 1usize..5, 1usize..9).prop_flat_map(|(h, w, d)| {
                (Just(h), Just(w), Just(d), proptest::collection::vec(-1e30f32..1e30, h * w * d))
            })
        ) {
            let grid = EmbeddingGrid::new(h, w, d, values).unwrap();
            let back = decode_tensor_archive(&encode_tensor_archive(&grid).unwrap()).unwrap();
            let a: Vec<u32> = grid.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.shape(), grid.shape());
        }
    }
}
