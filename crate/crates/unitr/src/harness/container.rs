//! The `.utr` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"UTR1"
//! count   u64
//! entry*  name_len u64, name utf-8 bytes,
//!         dtype u8 (0 = f32, 1 = i64, 2 = u8),
//!         ndim u64, dims u64 * ndim,
//!         payload row-major little-endian
//! ```
//!
//! A zero-dim entry is a scalar with one element; a dim of zero makes the
//! payload empty. Writing is append-order preserving, so equal inputs
//! produce byte-identical files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UTR1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn f32(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Self {
        Self { name: name.into(), dims, data: TensorData::F32(data) }
    }

    pub fn i64(name: impl Into<String>, dims: Vec<u64>, data: Vec<i64>) -> Self {
        Self { name: name.into(), dims, data: TensorData::I64(data) }
    }

    pub fn u8(name: impl Into<String>, dims: Vec<u64>, data: Vec<u8>) -> Self {
        Self { name: name.into(), dims, data: TensorData::U8(data) }
    }

    fn element_count(&self) -> u64 {
        self.dims.iter().product::<u64>()
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            if e.element_count() != e.data.len() as u64 {
                return Err(Error::Container(format!(
                    "entry `{}`: dims {:?} imply {} elements but payload has {}",
                    e.name,
                    e.dims,
                    e.element_count(),
                    e.data.len()
                )));
            }
            w.write_all(&(e.name.len() as u64).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.data.dtype_code()])?;
            w.write_all(&(e.dims.len() as u64).to_le_bytes())?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::I64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container(format!("bad magic {magic:?}")));
        }
        let count = read_u64(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Container(format!("entry name not utf-8: {e}")))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u64(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r)?);
            }
            let n = dims.iter().product::<u64>() as usize;
            let data = match dtype[0] {
                0 => {
                    let mut v = Vec::with_capacity(n);
                    let mut b = [0u8; 4];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        v.push(f32::from_le_bytes(b));
                    }
                    TensorData::F32(v)
                }
                1 => {
                    let mut v = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        v.push(i64::from_le_bytes(b));
                    }
                    TensorData::I64(v)
                }
                2 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v)?;
                    TensorData::U8(v)
                }
                c => return Err(Error::Container(format!("unknown dtype code {c}"))),
            };
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let out = Self::read_from(&mut cursor)?;
        if cursor.position() != bytes.len() as u64 {
            return Err(Error::Container("trailing bytes after last entry".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// f64 payloads ride in i64 entries as raw bit patterns; the format has no
/// f64 code and bit-casting keeps cache round-trips exact.
pub fn f64_bits(values: &[f64]) -> Vec<i64> {
    values.iter().map(|v| v.to_bits() as i64).collect()
}

pub fn f64_from_bits(bits: &[i64]) -> Vec<f64> {
    bits.iter().map(|b| f64::from_bits(*b as u64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_basic() {
        let mut c = TensorContainer::new();
        c.push(TensorEntry::f32("feat", vec![2, 3], vec![0.0, 1.5, -2.0, 3.25, 4.0, 5.0]));
        c.push(TensorEntry::i64("idx", vec![4], vec![-1, 0, 7, i64::MAX]));
        c.push(TensorEntry::u8("mask", vec![2, 2], vec![0, 1, 1, 0]));
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn zero_dim_is_scalar() {
        let mut c = TensorContainer::new();
        c.push(TensorEntry::f32("s", vec![], vec![42.0]));
        let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get("s").unwrap().data, TensorData::F32(vec![42.0]));
    }

    #[test]
    fn size_zero_dim_is_empty() {
        let mut c = TensorContainer::new();
        c.push(TensorEntry::i64("e", vec![0, 3], vec![]));
        let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back.get("e").unwrap().data.is_empty());
    }

    #[test]
    fn dims_payload_mismatch_rejected() {
        let mut c = TensorContainer::new();
        c.push(TensorEntry::f32("bad", vec![3], vec![1.0]));
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(TensorContainer::from_bytes(b"XXXX\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn f64_bitcast_is_exact() {
        let vals = vec![0.1, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300];
        assert_eq!(f64_from_bits(&f64_bits(&vals)), vals);
    }
}
