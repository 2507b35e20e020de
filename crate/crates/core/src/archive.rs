//! Binary container for named tensors, shared by weight bundles and the
//! adversarial-example cache.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     4 bytes  "SRTA"
//! version   u32      1
//! kind      u32      1 = weight bundle, 2 = adversarial cache
//! n_meta    u32
//!   key     str
//!   value   str
//! n_tensor  u32
//!   name    str
//!   ndim    u32
//!   dims    u64 * ndim
//!   data    f64 * prod(dims)
//! checksum  32 bytes SHA-256 of every preceding byte
//!
//! str = u32 byte length followed by UTF-8 bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRTA";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ArchiveKind {
    Weights = 1,
    AdversarialCache = 2,
}

impl ArchiveKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Self::Weights),
            2 => Ok(Self::AdversarialCache),
            other => Err(Error::Integrity(format!("unknown archive kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: ArchiveKind) -> Self {
        Self {
            kind,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Integrity(format!("missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(buf: &mut Vec<u8>, s: &str) {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.kind as u32).to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + CHECKSUM_LEN {
            return Err(Error::Integrity(format!("archive too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported archive version {version}")));
        }
        let kind = ArchiveKind::from_u32(r.u32()?)?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.push((k, v));
        }
        let n_tensor = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensor.min(1024));
        for _ in 0..n_tensor {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("tensor `{name}` size overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { kind, meta, tensors })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity(format!("unexpected end of archive at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8 string".into()))
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Exact textual encoding of an `f64` (its IEEE bits in hex).
pub fn f64_to_meta(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_meta(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Integrity(format!("bad float field `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new(ArchiveKind::Weights);
        a.meta.push(("seed".into(), "42".into()));
        a.meta.push(("acc".into(), f64_to_meta(0.1 + 0.2)));
        a.tensors.push(("w".into(), Tensor::from_fn(vec![2, 3], |i| i as f64 / 3.0)));
        a.tensors.push(("b".into(), Tensor::new(vec![1], vec![-0.0]).unwrap()));
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(f64_from_meta(b.meta("acc").unwrap()).unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn every_truncation_is_an_integrity_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            match Archive::from_bytes(&bytes[..cut]) {
                Err(Error::Integrity(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_bit_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[40] ^= 0x10;
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Integrity(_))));
    }
}
