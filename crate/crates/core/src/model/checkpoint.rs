//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RFLOWCKP"
//! version    u32
//! count      u32      number of named slices
//! per slice: name_len u32, name (UTF-8), offset u64, ndims u32, dims u64 × ndims
//! values     f64 × Σ slice lengths
//! ```
//!
//! The same layout stores model parameters and feature tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, SliceInfo};

pub const MAGIC: &[u8; 8] = b"RFLOWCKP";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.slices().len() as u32).to_le_bytes());
    for s in store.slices() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for &d in &s.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in store.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::format(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut slices = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("slice name is not UTF-8"))?
            .to_string();
        let offset = r.u64()? as usize;
        let ndims = r.u32()? as usize;
        let dims = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        slices.push(SliceInfo { name, offset, dims });
    }
    let rest = &bytes[r.at..];
    if rest.len() % 8 != 0 {
        return Err(Error::format("value block is not a whole number of f64"));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamStore::from_parts(slices, values)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(parts: &[(String, Vec<usize>)], values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let mut at = 0;
        for (name, dims) in parts {
            let n: usize = dims.iter().product();
            s.register(name, dims, values[at..at + n].to_vec()).unwrap();
            at += n;
        }
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..3), 1..5),
            seed in any::<u64>(),
        ) {
            let parts: Vec<(String, Vec<usize>)> =
                dims.into_iter().enumerate().map(|(i, d)| (format!("t{i}.ß"), d)).collect();
            let total: usize = parts.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
            let mut x = seed;
            let values: Vec<f64> = (0..total).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x >> 2)
            }).collect();
            let s = store_from(&parts, &values);
            let back = decode(&encode(&s)).unwrap();
            prop_assert_eq!(back.slices(), s.slices());
            let a: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let s = store_from(&[("ab".into(), vec![2])], &[1.0, -0.5]);
        let bytes = encode(&s);
        assert_eq!(&bytes[..8], b"RFLOWCKP");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], b"ab");
        assert_eq!(&bytes[22..30], &0u64.to_le_bytes());
        assert_eq!(&bytes[30..34], &1u32.to_le_bytes());
        assert_eq!(&bytes[34..42], &2u64.to_le_bytes());
        assert_eq!(&bytes[42..50], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 58);
    }

    #[test]
    fn rejects_corruption() {
        let s = store_from(&[("w".into(), vec![3])], &[1.0, 2.0, 3.0]);
        let mut bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
