//! Binary feature bundles, one file per utterance. All integers and floats
//! are little-endian:
//!
//! ```text
//! magic      4 bytes  "SERB"
//! version    u16      1
//! utterance  str
//! domain     str
//! label      str
//! count      u16      number of feature blocks
//! per block:
//!   name     str
//!   kind     u8       0 = vector [d], 1 = sequence [L × d]
//!   dims     u32 d            (vector)
//!            u32 L, u32 d     (sequence)
//!   payload  f32 × numel, row-major
//! str = u16 byte length + UTF-8 bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::FeatureKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SERB";
pub const VERSION: u16 = 1;

/// One utterance's precomputed features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub utterance_id: String,
    pub domain: String,
    pub label: String,
    /// `(name, value)`; sequences are `[L × d]`, vectors `[d]`.
    pub features: Vec<(String, Tensor)>,
}

impl FeatureBundle {
    pub fn feature(&self, name: &str) -> Option<&Tensor> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.utterance_id, &self.domain, &self.label] {
            put_str(&mut out, s, &self.utterance_id)?;
        }
        let count = u16::try_from(self.features.len()).map_err(|_| self.err("too many features"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.features {
            put_str(&mut out, name, &self.utterance_id)?;
            match t.shape() {
                [d] => {
                    out.push(0);
                    out.extend_from_slice(&dim(*d, &self.utterance_id)?.to_le_bytes());
                }
                [l, d] => {
                    out.push(1);
                    out.extend_from_slice(&dim(*l, &self.utterance_id)?.to_le_bytes());
                    out.extend_from_slice(&dim(*d, &self.utterance_id)?.to_le_bytes());
                }
                other => return Err(self.err(format!("feature `{name}` has unsupported shape {other:?}"))),
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let utterance_id = r.str()?;
        let domain = r.str()?;
        let label = r.str()?;
        let count = r.u16()?;
        let mut features = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str()?;
            let shape = match r.u8()? {
                0 => vec![r.u32()? as usize],
                1 => vec![r.u32()? as usize, r.u32()? as usize],
                k => return Err(r.fail(format!("feature `{name}` has unknown kind {k}"))),
            };
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail("payload size overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            features.push((name, Tensor::new(shape, data).expect("shape product")));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(FeatureBundle {
            utterance_id,
            domain,
            label,
            features,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Bundle {
            utterance: self.utterance_id.clone(),
            msg: msg.into(),
        }
    }
}

/// Kind implied by a stored shape.
pub fn kind_of(t: &Tensor) -> Option<FeatureKind> {
    match t.rank() {
        1 => Some(FeatureKind::Vector),
        2 => Some(FeatureKind::Sequence),
        _ => None,
    }
}

fn dim(d: usize, utt: &str) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Bundle {
        utterance: utt.to_string(),
        msg: format!("dimension {d} does not fit in u32"),
    })
}

fn put_str(out: &mut Vec<u8>, s: &str, utt: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Bundle {
        utterance: utt.to_string(),
        msg: format!("string of {} bytes is too long", s.len()),
    })?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{} (at byte {})", msg.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }
}
