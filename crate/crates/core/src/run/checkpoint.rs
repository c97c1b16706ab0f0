//! Binary parameter checkpoints.
//!
//! Layout: `b"PPOT"`, `u32` version, then records up to the end of the
//! file, each a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! extents as `u64` and the values as little-endian `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PPOT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing PPOT magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Overwrites every parameter of `store` from `records`, which must hold
/// exactly the same names and shapes.
pub fn restore(store: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} records for {} parameters",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match model {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::randn(&[3, 4], 1.0, &mut rng));
        s.add("a.bias", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        s.add("b", Tensor::scalar(std::f64::consts::PI));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let bytes = encode(&s);
        let mut fresh = ParamStore::new();
        fresh.add("a.weight", Tensor::zeros(&[3, 4]));
        fresh.add("a.bias", Tensor::zeros(&[3]));
        fresh.add("b", Tensor::scalar(0.0));
        restore(&mut fresh, decode(&bytes).unwrap()).unwrap();
        for ((_, x), (_, y)) in s.iter().zip(fresh.iter()) {
            let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert_eq!(encode(&fresh), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"PPOT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(&bytes[12..20], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&store());
        bytes[4] = 2;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let records = decode(&encode(&store())).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[4, 3]));
        other.add("a.bias", Tensor::zeros(&[3]));
        other.add("b", Tensor::scalar(0.0));
        assert!(restore(&mut other, records.clone()).is_err());
        let mut fewer = ParamStore::new();
        fewer.add("b", Tensor::scalar(0.0));
        assert!(restore(&mut fewer, records).is_err());
    }
}
