//! `PCK1` checkpoint container: named little-endian f32 arrays.

use std::io::{Read, Write};
use std::path::Path;

use super::{Array, GradError};

const MAGIC: &[u8; 4] = b"PCK1";
const META_PREFIX: &str = "__cfg/";

/// Ordered list of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Array<f32>)>,
}

impl Checkpoint {
    /// Appends an entry, replacing any existing entry with the same name.
    pub fn push(&mut self, name: &str, value: Array<f32>) {
        if let Some(e) = self.entries.iter_mut().find(|(n, _)| n == name) {
            e.1 = value;
        } else {
            self.entries.push((name.to_string(), value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn entries(&self) -> &[(String, Array<f32>)] {
        &self.entries
    }

    /// Stores a small numeric setting under the reserved `__cfg/` prefix.
    /// Values are kept in single precision.
    pub fn push_meta(&mut self, key: &str, values: &[f64]) {
        let data = values.iter().map(|&v| v as f32).collect();
        let arr = Array::from_vec(&[values.len()], data).expect("length matches");
        self.push(&format!("{META_PREFIX}{key}"), arr);
    }

    pub fn meta(&self, key: &str) -> Option<Vec<f64>> {
        self.get(&format!("{META_PREFIX}{key}"))
            .map(|a| a.data().iter().map(|&v| v as f64).collect())
    }

    /// Copies every entry of `other` into `self`.
    pub fn merge(&mut self, other: Checkpoint) {
        for (n, a) in other.entries {
            self.push(&n, a);
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), GradError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| GradError::Malformed(format!("name too long: {name}")))?;
            let ndim = u8::try_from(arr.ndim())
                .map_err(|_| GradError::Malformed(format!("too many dims in {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[ndim])?;
            for &d in arr.shape() {
                let d = u32::try_from(d).map_err(|_| GradError::Malformed(format!("extent too large in {name}")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for v in arr.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GradError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(GradError::BadMagic);
        }
        let count = cur.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| GradError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = cur.take(n.checked_mul(4).ok_or(GradError::Truncated)?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.entries.push((name, Array::from_vec(&shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(GradError::Malformed("trailing bytes".into()));
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GradError> {
        let end = self.pos.checked_add(n).ok_or(GradError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(GradError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, GradError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, GradError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), GradError> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, GradError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut ck = Checkpoint::default();
        ck.push("ab", Array::from_vec(&[2], vec![1.0f32, -2.5]).unwrap());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut expect = b"PCK1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(1);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(Checkpoint::from_bytes(&buf).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::default();
        ck.push("x", Array::scalar(3.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&buf[..buf.len() - 1]), Err(GradError::Truncated)));
        buf[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&buf), Err(GradError::BadMagic)));
    }
}
