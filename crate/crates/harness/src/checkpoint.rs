//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "HARLCKPT"            8 bytes magic
//! version               u32 (currently 1)
//! config echo length    u32, then that many UTF-8 bytes
//! seed                  u64
//! block count           u32
//! per block:
//!   name length         u32, then the UTF-8 name
//!   trainable           u8 (0 or 1)
//!   rows, cols          u32, u32
//!   values              rows*cols f64, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use harl::model::{HarlParams, ParamBlock};
use harl::Matrix;

use crate::error::{HarnessError, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"HARLCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub seed: u64,
    pub params: HarlParams,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_matrix(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    put_u32(out, m.rows())?;
    put_u32(out, m.cols())?;
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    pub(crate) fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.u32()?, self.u32()?);
        let n = r.checked_mul(c).ok_or_else(|| bad("matrix dims overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(bad(format!("matrix {r}x{c} exceeds the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::new(r, c, data)?)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_echo)?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.params.blocks.len())?;
        for b in &self.params.blocks {
            put_str(&mut out, &b.name)?;
            out.push(b.trainable as u8);
            put_matrix(&mut out, &b.value)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(8).ok() != Some(CKPT_MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()? as u32;
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_echo = r.str()?;
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(bad(format!("bad trainable flag {v} for {name}"))),
            };
            let value = r.matrix()?;
            blocks.push(ParamBlock { name, value, trainable });
        }
        r.finish()?;
        Ok(Self { config_echo, seed, params: HarlParams { blocks } })
    }

    /// Writes via a temporary file and a rename, so an existing checkpoint
    /// is never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let blocks = vec![
            ParamBlock { name: "a".into(), value: Matrix::from_rows(&[&[1.0, -2.5], &[f64::MIN_POSITIVE, 3e300]]), trainable: true },
            ParamBlock { name: "pose.w1".into(), value: Matrix::zeros(1, 3), trainable: false },
        ];
        Checkpoint { config_echo: "seed = 7\n".into(), seed: 7, params: HarlParams { blocks } }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"HARLCKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
