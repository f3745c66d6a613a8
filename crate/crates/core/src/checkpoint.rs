//! CRCK named-tensor container, used for model parameters, optimizer
//! moments and scheduler state.
//!
//! Layout (little-endian): magic `b"CRCK"`, version u16 (= 1), entry count
//! u32, then per entry: name length u16, UTF-8 name bytes, rank u8, one u32
//! per extent, and the `f32` payload.

use std::path::Path;

use crate::binio::{put_f32s, put_u16, put_u32, Reader};
use crate::error::{invalid, Error, Result};

pub const CRCK_MAGIC: &[u8; 4] = b"CRCK";
pub const CRCK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<NamedTensor>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(invalid(format!("{name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.get(&name).is_some() {
            return Err(invalid(format!("duplicate entry {name}")));
        }
        self.entries.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no entry {name:?}")))
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn extend(&mut self, other: NamedTensors) -> Result<()> {
        for e in other.entries {
            self.push(e.name, e.shape, e.data)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CRCK_MAGIC);
        put_u16(&mut out, CRCK_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize || e.shape.len() > u8::MAX as usize {
                return Err(invalid(format!("entry {} does not fit the header", e.name)));
            }
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                put_u32(&mut out, u32::try_from(d).map_err(|_| invalid("extent exceeds u32"))?);
            }
            put_f32s(&mut out, &e.data);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CRCK_MAGIC)?;
        let version = r.u16("version")?;
        if version != CRCK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")?;
        let mut out = Self::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("{name}: extent overflow")))?;
            let data = r.f32s(n, &name)?;
            out.push(name, shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut t = NamedTensors::new();
        t.push("a.weight", vec![2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.1, 1e30, -0.0]).unwrap();
        t.push("b", vec![1], vec![7.0]).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = NamedTensors::decode(&t.encode().unwrap()).unwrap();
        for (a, b) in t.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().encode().unwrap();
        assert!(matches!(NamedTensors::decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        bytes[3] = b'X';
        assert!(matches!(NamedTensors::decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_duplicates_and_shape_mismatch() {
        let mut t = sample();
        assert!(t.push("b", vec![1], vec![0.0]).is_err());
        assert!(t.push("c", vec![2], vec![0.0]).is_err());
    }
}
