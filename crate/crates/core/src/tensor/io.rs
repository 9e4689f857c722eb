//! Binary tensor archive ("ALEC" checkpoint container).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ALEC"  u32 version  u32 header_len  header (UTF-8)
//! repeated sections:
//!   tag [u8; 4]  u64 body_len  body
//!     body = u32 meta_len  meta  u32 count  count x entry
//!     entry = u32 name_len  name  u32 ndim  ndim x u64 extent  u8 dtype  raw values
//! "END."
//! ```
//!
//! Parameters live in a `PARM` section; optimizer state uses its own tag.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Real};

pub const MAGIC: &[u8; 4] = b"ALEC";
pub const VERSION: u32 = 1;
const END: &[u8; 4] = b"END.";

#[derive(Clone, Debug, PartialEq)]
pub struct Section<T> {
    pub tag: [u8; 4],
    /// Free-form section metadata (the archive owner decides its encoding).
    pub meta: Vec<u8>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub header: String,
    pub sections: Vec<Section<T>>,
}

impl<T: Real> Archive<T> {
    pub fn section(&self, tag: &[u8; 4]) -> Option<&Section<T>> {
        self.sections.iter().find(|s| &s.tag == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        for s in &self.sections {
            let mut body = Vec::new();
            body.extend_from_slice(&(s.meta.len() as u32).to_le_bytes());
            body.extend_from_slice(&s.meta);
            body.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                body.extend_from_slice(&(name.len() as u32).to_le_bytes());
                body.extend_from_slice(name.as_bytes());
                body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    body.extend_from_slice(&(d as u64).to_le_bytes());
                }
                body.push(T::DTYPE as u8);
                for &v in t.data() {
                    v.write_le(&mut body);
                }
            }
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out.extend_from_slice(END);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic (not an ALEC checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = r.u32()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let mut sections = Vec::new();
        loop {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            if &tag == END {
                break;
            }
            let blen = r.u64()? as usize;
            let body = r.take(blen)?;
            let mut b = Reader { bytes: body, pos: 0, path };
            let mlen = b.u32()? as usize;
            let meta = b.take(mlen)?.to_vec();
            let count = b.u32()? as usize;
            let mut tensors = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let nlen = b.u32()? as usize;
                let name = String::from_utf8(b.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
                let ndim = b.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim.min(16));
                for _ in 0..ndim {
                    shape.push(b.u64()? as usize);
                }
                let dtype = DType::from_tag(b.take(1)?[0]).ok_or_else(|| Error::format(path, format!("unknown dtype for {name}")))?;
                let n: usize = shape.iter().product();
                let raw = b.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
                let data: Vec<T> = match dtype {
                    d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
                    DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                    DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
                };
                let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
                tensors.push((name, t));
            }
            if b.pos != body.len() {
                return Err(Error::format(path, "trailing bytes in section"));
            }
            sections.push(Section { tag, meta, tensors });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after end marker"));
        }
        Ok(Archive { header, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Element type recorded for the first tensor of an archive file, if any.
pub fn peek_dtype(bytes: &[u8]) -> Option<DType> {
    let hlen = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
    let mut pos = 12 + hlen;
    // first section: tag, body_len, meta
    pos += 4 + 8;
    let mlen = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
    pos += 4 + mlen + 4;
    let nlen = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
    pos += 4 + nlen;
    let ndim = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
    pos += 4 + 8 * ndim;
    DType::from_tag(*bytes.get(pos)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive<f32> {
        Archive {
            header: "{\"k\": 1}".into(),
            sections: vec![
                Section {
                    tag: *b"PARM",
                    meta: vec![],
                    tensors: vec![
                        ("a".into(), Tensor::new([2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0]).unwrap()),
                        ("s".into(), Tensor::scalar(7.0)),
                    ],
                },
                Section { tag: *b"ADAM", meta: vec![1, 2, 3], tensors: vec![] },
            ],
        }
    }

    #[test]
    fn round_trip_and_dtype_peek() {
        let a = sample();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(peek_dtype(&bytes), Some(DType::F32));
        assert_eq!(Archive::<f32>::from_bytes(&bytes, Path::new("x")).unwrap(), a);
        // cross-precision load converts values
        let wide = Archive::<f64>::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(wide.sections[0].tensors[0].1.data()[1], -2.5);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Archive::<f32>::from_bytes(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::<f32>::from_bytes(&bad, Path::new("x")).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(Archive::<f32>::from_bytes(&v2, Path::new("x")).unwrap_err().to_string().contains("version"));
    }
}
