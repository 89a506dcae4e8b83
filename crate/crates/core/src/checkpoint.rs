//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASTR" | version: u32 | count: u32
//! per tensor: name_len: u16 | name: UTF-8 | rank: u8 | dims: u64 × rank | data: f64 × Π dims
//! ```
//!
//! Readers parse the whole buffer before returning anything, so a damaged
//! file never yields a partial tensor set.

use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ASTR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Self {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
        t
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![], vec![value])
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data)
    }

    pub fn matrix(name: impl Into<String>, m: &crate::numlin::Matrix) -> Self {
        Self::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    /// Bitwise equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"ASTR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("tensor name at offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("tensor {name:?} is too large to encode: {reason}")]
    TooLarge { name: String, reason: &'static str },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>, CheckpointError> {
    let count = u32::try_from(tensors.len()).map_err(|_| CheckpointError::TooLarge {
        name: String::new(),
        reason: "more than u32::MAX tensors",
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let too_large = |reason| CheckpointError::TooLarge {
            name: t.name.clone(),
            reason,
        };
        let name_len = u16::try_from(t.name.len()).map_err(|_| too_large("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| too_large("rank above 255"))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(too_large("dims do not match payload length"));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(rank);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Tensor>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::InvalidName(name_at))?
            .to_owned();
        let rank = r.array::<1>()?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            let d = usize::try_from(d).map_err(|_| CheckpointError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                available: buf.len() - r.pos,
            })?;
            len = len.saturating_mul(d);
            dims.push(d);
        }
        let bytes = r.take(len.saturating_mul(8))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(tensors)
}

pub fn checkpoint_write(path: &Path, tensors: &[Tensor]) -> Result<(), CheckpointError> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn checkpoint_read(path: &Path) -> Result<Vec<Tensor>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::scalar("scale", -0.0),
            Tensor::vector("w", vec![1.5, f64::NAN, f64::INFINITY]),
            Tensor::new("layers.0.weight", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Tensor::new("empty", vec![0, 4], vec![]),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.iter().zip(&back) {
            assert!(a.bit_eq(b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[Tensor::scalar("s", 1.0)]).unwrap();
        assert_eq!(&bytes[..4], b"ASTR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b's');
        assert_eq!(bytes[15], 0);
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&sample()).unwrap();
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n} decoded");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(_))));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::UnsupportedVersion(2)));
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        checkpoint_write(&p, &sample()).unwrap();
        let back = checkpoint_read(&p).unwrap();
        assert!(back.iter().zip(sample().iter()).all(|(a, b)| a.bit_eq(b)));
    }
}
