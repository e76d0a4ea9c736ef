//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `SHAPEDCK`, `u32` version, metadata text, style names,
//! vocabulary tokens, then tensor entries `(name, ndim, u64 dims, f64 data)`.
//! Strings are a `u32` byte length followed by UTF-8. Optimizer
//! accumulators are stored as entries whose names carry the `adagrad:`
//! prefix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SHAPEDCK";
pub const VERSION: u32 = 1;
const ACC_PREFIX: &str = "adagrad:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key=value` lines describing the model and training configuration.
    pub meta: String,
    pub styles: Vec<String>,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    /// Aligned with `params` when present.
    pub accumulators: Option<Vec<Tensor>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("unexpected end of file reading {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint {
            offset: start,
            message: "invalid UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        if ndim > 2 {
            return Err(self.corrupt(format!("tensor {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| self.corrupt(format!("tensor {name} larger than the file")))?;
        let raw = self.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.meta);
        w.u32(self.styles.len() as u32);
        for s in &self.styles {
            w.str(s);
        }
        w.u32(self.vocab.len() as u32);
        for t in &self.vocab {
            w.str(t);
        }
        let n_acc = self.accumulators.as_ref().map_or(0, Vec::len);
        w.u32((self.params.len() + n_acc) as u32);
        for (_, name, t) in self.params.iter() {
            w.tensor(name, t);
        }
        if let Some(acc) = &self.accumulators {
            for ((_, name, _), t) in self.params.iter().zip(acc) {
                w.tensor(&format!("{ACC_PREFIX}{name}"), t);
            }
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.bytes(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint {
                offset: 0,
                message: "not a checkpoint file".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta = r.str()?;
        let n_styles = r.u32()? as usize;
        let styles = (0..n_styles).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_vocab = r.u32()? as usize;
        let vocab = (0..n_vocab).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_entries = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut acc = Vec::new();
        for _ in 0..n_entries {
            let at = r.pos;
            let (name, t) = r.tensor()?;
            let dup = |message: String| Error::Checkpoint { offset: at, message };
            match name.strip_prefix(ACC_PREFIX) {
                None => {
                    params.add(name, t).map_err(|e| dup(e.to_string()))?;
                }
                Some(base) => {
                    let expected = params.ids().nth(acc.len()).map(|id| params.name(id));
                    if expected != Some(base) {
                        return Err(dup(format!("accumulator {base} out of order")));
                    }
                    let id = params.id(base).expect("present");
                    if params.get(id).shape() != t.shape() {
                        return Err(dup(format!("accumulator {base} has the wrong shape")));
                    }
                    acc.push(t);
                }
            }
        }
        if r.pos != buf.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        let accumulators = match acc.len() {
            0 => None,
            n if n == params.len() => Some(acc),
            _ => return Err(r.corrupt("accumulators missing for some parameters")),
        };
        Ok(Checkpoint {
            meta,
            styles,
            vocab,
            params,
            accumulators,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .add("a/w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        params.add("b", Tensor::vector(vec![0.1])).unwrap();
        Checkpoint {
            meta: "hidden=4\n".into(),
            styles: vec!["x".into(), "y".into()],
            vocab: vec!["<pad>".into(), "é".into()],
            params,
            accumulators: Some(vec![Tensor::zeros(&[2, 2]), Tensor::vector(vec![4.0])]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, c);
        let neg_zero = back.params.get(back.params.id("a/w").unwrap()).data()[1];
        assert!(neg_zero == 0.0 && neg_zero.is_sign_negative());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        for cut in [3, 12, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.ck");
        assert!(matches!(Checkpoint::load(&p), Err(Error::MissingCheckpoint(q)) if q == p));
    }
}
