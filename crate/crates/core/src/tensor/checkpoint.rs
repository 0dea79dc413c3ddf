//! Flat binary parameter file.
//!
//! ```text
//! "IDRW" | version u32 | count u32
//! per parameter:
//!   name_len u32 | name (UTF-8) | dtype u8 | rank u32 | dims u32 * rank | payload (LE)
//! ```
//! All integers little-endian. The trainable flag is not stored; it is a
//! property of the run, not of the weights.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IDRW";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>, prefix: Option<&str>) -> Vec<u8> {
    let selected: Vec<_> = store
        .iter()
        .filter(|(_, p)| prefix.is_none_or(|pre| p.name.starts_with(pre)))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(selected.len() as u32).to_le_bytes());
    for (_, p) in selected {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// One decoded entry, converted to `T` regardless of the stored dtype.
#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<T>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<Entry<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * dtype.width())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        out.push(Entry {
            name,
            dtype,
            tensor: Tensor::from_vec(dims, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store, None);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Vec<Entry<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrites tensors in `store` from matching checkpoint entries. Returns
/// how many were loaded; entries absent from the store are an error, store
/// parameters absent from the checkpoint are kept.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry<T>]) -> Result<usize> {
    for e in entries {
        let p = store
            .by_name_mut(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
        if p.tensor.shape() != e.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, checkpoint {:?}",
                e.name,
                p.tensor.shape(),
                e.tensor.shape()
            )));
        }
        p.tensor = e.tensor.clone();
    }
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::full(&[2], 1.5), true);
        let b = encode(&s, None);
        assert_eq!(&b[..4], b"IDRW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        // name_len, "a", dtype, rank=1, dim=2, 2 * f32
        assert_eq!(b.len(), 12 + 4 + 1 + 1 + 4 + 4 + 8);
        assert_eq!(b[17], DType::F32.tag());
    }

    #[test]
    fn prefix_filter() {
        let mut s = ParamStore::<f64>::new();
        s.add("lm.x", Tensor::zeros(&[1]), false);
        s.add("docformer.y", Tensor::zeros(&[1]), true);
        let entries = decode::<f64>(&encode(&s, Some("docformer."))).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].name, "docformer.y");
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[3, 2]), true);
        let b = encode(&s, None);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let mut s = ParamStore::<f64>::new();
            s.add("docformer.w", rng.normal_tensor(&[rows, cols], 1.0), true);
            s.add("lm.b", rng.normal_tensor(&[cols], 1.0), false);
            let bytes = encode(&s, None);
            let entries = decode::<f64>(&bytes).unwrap();
            let mut fresh = ParamStore::<f64>::new();
            fresh.add("docformer.w", Tensor::zeros(&[rows, cols]), true);
            fresh.add("lm.b", Tensor::zeros(&[cols]), false);
            load_into(&mut fresh, &entries).unwrap();
            prop_assert_eq!(encode(&fresh, None), bytes);
        }
    }
}
