//! Little-endian binary containers.
//!
//! Two layouts share the primitives below:
//!
//! * datasets, magic `BGN1` (see [`crate::data`]);
//! * parameter blobs, magic `BGK1`, used for encoder and denoiser
//!   checkpoints, cached token sequences and generated latents:
//!
//! ```text
//! "BGK1" | u32 version=1 | u32 len + utf8 kind | u32 len + utf8 config (TOML)
//! u32 blob count, then per blob:
//!   u32 len + utf8 name | u32 rank | u64 dims[rank] | f64 payload[prod(dims)]
//! ```

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"BGK1";
pub const BLOB_VERSION: u32 = 1;

/// Cursor over a byte buffer that reports failures with their offset.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(8).map(LittleEndian::read_f64).collect())
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.offset();
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} is not valid utf-8"),
        })
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            ));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn put_string(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

pub fn put_f64s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
}

/// Decoded `BGK1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobFile {
    pub kind: String,
    pub config: String,
    pub blobs: Vec<(String, Tensor<f64>)>,
}

impl BlobFile {
    pub fn new(kind: &str, config: String) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            blobs: Vec::new(),
        }
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.blobs.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.write_u32::<LittleEndian>(BLOB_VERSION).unwrap();
        put_string(&mut out, &self.kind);
        put_string(&mut out, &self.config);
        out.write_u32::<LittleEndian>(self.blobs.len() as u32).unwrap();
        for (name, t) in &self.blobs {
            put_string(&mut out, name);
            out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            put_f64s(&mut out, t.data().iter().copied());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(BLOB_MAGIC)?;
        let version = r.u32("version")?;
        if version != BLOB_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let kind = r.string("kind")?;
        let config = r.string("config block")?;
        let n = r.u32("blob count")?;
        let mut blobs = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string("blob name")?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return r.fail(format!("blob {name:?} has rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let at = r.offset();
            let Some(count) = count.filter(|&c| c > 0) else {
                return r.fail(format!("blob {name:?} has invalid shape {shape:?}"));
            };
            let data = r.f64s(count, "blob payload")?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
            blobs.push((name, t));
        }
        r.finish()?;
        Ok(Self { kind, config, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Data(format!(
                "container holds {:?}, expected {:?}",
                self.kind, kind
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file, used as the checkpoint content hash in reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_file_round_trip_and_corruption() {
        let mut f = BlobFile::new("encoder", "a = 1\n".into());
        f.push("w", &Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1));
        let bytes = f.to_bytes();
        assert_eq!(BlobFile::from_bytes(&bytes).unwrap(), f);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(BlobFile::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let cut = &bytes[..bytes.len() - 3];
        match BlobFile::from_bytes(cut) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset > 0 && msg.contains("truncated"), "{offset} {msg}");
            }
            other => panic!("{other:?}"),
        }
    }
}
