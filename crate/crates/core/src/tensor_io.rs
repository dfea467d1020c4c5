//! `FYMT` tensor files and `FYMW` named-weight bundles.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"FYMT";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"FYMW";
pub const WEIGHTS_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

/// Serialize a tensor into its byte representation.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(u8::try_from(t.rank()).expect("rank fits a byte"));
    for &d in t.dims() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, FormatError> {
        self.magic(TENSOR_MAGIC)?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::UnsupportedDtype(dtype));
        }
        let ndim = self.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(FormatError::ZeroExtent(dims));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::SizeMismatch { declared: usize::MAX, actual: 0 })?;
        let available = self.bytes.len() - self.pos;
        if count.saturating_mul(4) > available {
            return Err(FormatError::Truncated {
                needed: count.saturating_mul(4),
                available,
            });
        }
        let data = self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(dims, data).expect("extent product checked"))
    }
}

/// Parse a single tensor; trailing bytes are rejected.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(FormatError::SizeMismatch {
            declared: t.len(),
            actual: (bytes.len() - TENSOR_HEADER_FIXED - 4 * t.rank()) / 4,
        });
    }
    Ok(t)
}

const TENSOR_HEADER_FIXED: usize = 6;

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_atomic(path.as_ref(), &buf)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensor(&bytes)?)
}

/// An ordered collection of named tensors.
pub type WeightMap = BTreeMap<String, Tensor>;

pub fn encode_weights(weights: &WeightMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights {
        let len = u16::try_from(name.len()).expect("tensor names are short");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightMap, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut map = WeightMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::BadName)?
            .to_owned();
        let t = r.tensor()?;
        map.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::SizeMismatch {
            declared: count as usize,
            actual: map.len(),
        });
    }
    Ok(map)
}

pub fn write_weights(weights: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_weights(weights))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_weights(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        assert_eq!(&b[..6], b"FYMT\x01\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 14 + 24);
    }

    #[test]
    fn bad_magic() {
        let mut b = Vec::new();
        encode_tensor(&Tensor::ones(vec![2]), &mut b);
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&b), Err(FormatError::BadMagic { found, .. }) if &found == b"XXXX"));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut b = Vec::new();
        encode_tensor(&Tensor::ones(vec![2, 3]), &mut b);
        b.truncate(b.len() - 4);
        assert_eq!(decode_tensor(&b), Err(FormatError::Truncated { needed: 24, available: 20 }));
    }

    #[test]
    fn trailing_bytes_are_size_mismatch() {
        let mut b = Vec::new();
        encode_tensor(&Tensor::ones(vec![2, 3]), &mut b);
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_tensor(&b), Err(FormatError::SizeMismatch { declared: 6, actual: 7 })));
    }

    #[test]
    fn other_header_errors() {
        assert!(matches!(decode_tensor(b"FYMT\x02\x01"), Err(FormatError::UnsupportedDtype(2))));
        assert!(matches!(decode_tensor(b"FYMT\x01\x01\0\0\0\0"), Err(FormatError::ZeroExtent(_))));
        assert!(matches!(decode_tensor(b"FY"), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode_weights(b"FYMW\x02\x00\0\0\0\0"), Err(FormatError::UnsupportedVersion(2))));
    }

    #[test]
    fn weights_file_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = WeightMap::new();
        w.insert("a.weight".into(), Tensor::from_fn(vec![3, 2, 1], |i| i as f32 * -0.25));
        w.insert("b".into(), Tensor::full(vec![1], f32::MIN_POSITIVE));
        let p = dir.path().join("m.fymw");
        write_weights(&w, &p).unwrap();
        let back = read_weights(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &w {
            assert!(back[k].bits_eq(v));
        }
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_is_bitwise(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut b = Vec::new();
            encode_tensor(&t, &mut b);
            prop_assert!(decode_tensor(&b).unwrap().bits_eq(&t));
        }

        #[test]
        fn weights_roundtrip_is_bitwise(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
            let mut w = WeightMap::new();
            w.insert("x".into(), Tensor::new(vec![values.len()], values.clone()).unwrap());
            w.insert("y.z".into(), Tensor::new(vec![1, values.len()], values).unwrap());
            let back = decode_weights(&encode_weights(&w)).unwrap();
            prop_assert_eq!(back.keys().collect::<Vec<_>>(), w.keys().collect::<Vec<_>>());
            for (k, v) in &w {
                prop_assert!(back[k].bits_eq(v));
            }
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_tensor(&bytes);
            let _ = decode_weights(&bytes);
        }
    }
}
