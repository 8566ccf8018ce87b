//! Binary checkpoint format for named tensors.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   8 bytes  "SSMBCKPT"
//! version 1 byte   0x01
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8), rank u8, rank x u32 extents,
//!   product(extents) x f32 values
//! crc     u32      CRC32 of every preceding byte
//! ```
//!
//! Tensors are stored as `f32` regardless of the in-memory scalar type, and
//! writes are byte-deterministic for a fixed tensor list, so save/load
//! round-trips are bitwise exact for `f32` models.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSMBCKPT";
pub const VERSION: u8 = 0x01;

/// Serializes `(name, tensor)` pairs in the given order.
pub fn write_named(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::TensorShape {
                name: name.clone(),
                detail: "name longer than 65535 bytes".into(),
            });
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::TensorShape { name: name.clone(), detail: "rank exceeds 255".into() });
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn read_named(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated("shorter than magic header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::TensorShape {
                name: String::from_utf8_lossy(name_bytes).into_owned(),
                detail: "name is not valid UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("values of `{name}`"))?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = Tensor::from_vec(shape, data)?;
        out.push((name, tensor));
    }
    let crc_start = r.pos;
    let stored = u32::from_le_bytes(
        r.take(4, "CRC trailer")?
            .try_into()
            .expect("take(4) yields 4 bytes"),
    );
    if r.pos != bytes.len() {
        return Err(Error::Truncated(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(&bytes[..crc_start]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!("unexpected end of file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "byte")?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2, "u16")?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, "u32")?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 0.0, 4.0, 5.5, -6.25]).unwrap()),
            ("a.bias".into(), Tensor::from_vec(vec![3], vec![0.5, 1.5, 2.5]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let tensors = sample();
        let bytes = encode(&tensors).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(tensors, back);
        // re-encode reproduces identical bytes
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_is_distinct() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::CorruptMagic)));
    }

    #[test]
    fn truncation_mid_tensor_is_distinct() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(decode(cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        match decode(&bytes) {
            Err(Error::CrcMismatch { .. }) | Err(Error::Truncated(_)) | Err(Error::TensorShape { .. }) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 0x7f;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(0x7f))));
    }
}
