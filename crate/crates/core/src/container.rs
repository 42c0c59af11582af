//! Shared binary container for checkpoints, scenes and class maps:
//!
//! ```text
//! magic[4] | version u32 | header_len u64 | header (key=value lines) | payload_len u64 | payload | crc64
//! ```
//!
//! All integers are little-endian; the checksum covers every preceding byte.
//! Readers check the magic, then the version, then the checksum, and only then parse.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const FIXED: usize = 4 + 4 + 8 + 8 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub header: Vec<(String, String)>,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        Self { magic: *magic, version, header: Vec::new(), payload: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("header is missing '{key}'")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Format(format!("header value {key}={raw} is malformed")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut out = Vec::with_capacity(FIXED + header.len() + self.payload.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let sum = CRC.checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4], supported: u32) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Integrity(format!("file is truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != supported {
            return Err(Error::UnsupportedVersion { found: version, supported });
        }
        if bytes.len() < FIXED {
            return Err(Error::Integrity(format!("file is truncated ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if CRC.checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = ByteReader::new(&body[8..]);
        let header_len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header = header
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("malformed header line '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        if !r.is_empty() {
            return Err(Error::Integrity("trailing bytes after payload".into()));
        }
        Ok(Self { magic: *magic, version, header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &[u8; 4], supported: u32) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| if e.kind() == std::io::ErrorKind::NotFound {
                Error::DataNotFound { what: "file".into(), path: path.to_path_buf() }
            } else {
                e.into()
            })?;
        Self::from_bytes(&bytes, magic, supported)
    }
}

/// Cursor over a byte slice whose reads fail with integrity errors when short.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("field of {n} bytes runs past the end of the data")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    /// Reads `(name_len u32, name, count u64, precision u8, values)`; values are converted to `T`.
    pub fn named_buffer<T: Real>(&mut self) -> Result<(String, Vec<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("buffer name is not UTF-8".into()))?;
        let count = self.u64()? as usize;
        let tag = self.u8()?;
        let precision = Precision::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
        let values = match precision {
            Precision::Single => self.values::<f32, T>(count)?,
            Precision::Double => self.values::<f64, T>(count)?,
        };
        Ok((name, values))
    }

    fn values<S: Real, T: Real>(&mut self, count: usize) -> Result<Vec<T>> {
        let raw = self.take(count.checked_mul(S::BYTES).ok_or_else(|| Error::Integrity("buffer length overflows".into()))?)?;
        Ok(raw.chunks_exact(S::BYTES).map(|c| T::of(S::read_le(c).f64())).collect())
    }
}

pub fn write_named_buffer<T: Real>(out: &mut Vec<u8>, name: &str, values: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    out.push(T::PRECISION.tag());
    for &v in values {
        v.write_le(out);
    }
}

pub fn write_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    write_named_buffer(out, name, t.data());
}
