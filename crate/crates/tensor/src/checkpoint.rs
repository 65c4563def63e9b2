//! `TGCK` checkpoint files.
//!
//! Layout (little-endian): magic `TGCK`, `u32` version, `u32` record count,
//! then per record: `u32` name length, UTF-8 name, `u32` rank, `rank` × `u64`
//! extents, and the `f64` payload in row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::optim::Module;

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "opt.momentum.";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| TensorError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(fail("bad magic, not a TGCK checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fail("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| fail(format!("{name}: extent overflow")))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| TensorError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, self.to_bytes()).map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters, running statistics and momentum buffers of `module`.
    pub fn from_module(module: &dyn Module) -> Self {
        let mut ck = Checkpoint::default();
        let mut momenta = Vec::new();
        module.visit_params(&mut |p| {
            ck.push(p.name.clone(), p.shape(), p.value().to_vec());
            if let Some(m) = &p.momentum_buffer {
                momenta.push((format!("{MOMENTUM_PREFIX}{}", p.name), m.shape().to_vec(), m.to_vec()));
            }
        });
        module.visit_buffers(&mut |b| {
            let stats = b.stats.lock().expect("stats lock");
            ck.push(format!("{}.running_mean", b.name), &[stats.mean.len()], stats.mean.clone());
            ck.push(format!("{}.running_var", b.name), &[stats.var.len()], stats.var.clone());
        });
        for (name, shape, data) in momenta {
            ck.push(name, &shape, data);
        }
        ck
    }

    /// Loads every parameter and buffer of `module` by name. Missing or
    /// mis-shaped entries are rejected; momentum buffers are optional.
    pub fn restore(&self, module: &mut dyn Module, path: &Path) -> Result<()> {
        let by_name: HashMap<&str, &Record> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let fail = |msg: String| TensorError::Checkpoint {
            path: PathBuf::from(path),
            msg,
        };
        let lookup = |name: &str, shape: &[usize]| -> Result<&Record> {
            let rec = by_name.get(name).ok_or_else(|| fail(format!("missing tensor {name}")))?;
            if rec.shape != shape {
                return Err(fail(format!("{name}: stored shape {:?}, model expects {shape:?}", rec.shape)));
            }
            Ok(rec)
        };
        let mut err = None;
        module.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let res = lookup(&p.name, p.shape()).and_then(|rec| {
                p.set_data(rec.data.clone())?;
                p.momentum_buffer = by_name
                    .get(format!("{MOMENTUM_PREFIX}{}", p.name).as_str())
                    .filter(|m| m.shape == p.shape())
                    .map(|m| crate::Tensor::raw(m.data.clone(), m.shape.clone()));
                Ok(())
            });
            if let Err(e) = res {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut err = None;
        module.visit_buffers(&mut |b| {
            if err.is_some() {
                return;
            }
            let mut stats = b.stats.lock().expect("stats lock");
            let c = stats.mean.len();
            let res = lookup(&format!("{}.running_mean", b.name), &[c]).and_then(|m| {
                let v = lookup(&format!("{}.running_var", b.name), &[c])?;
                stats.mean = m.data.clone();
                stats.var = v.data.clone();
                Ok(())
            });
            if let Err(e) = res {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("a.weight", &[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 1.0 / 3.0]);
        ck.push("meta.iteration", &[], vec![64.0]);
        ck
    }

    #[test]
    fn byte_layout_header() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"TGCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.records[0].data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_inputs_are_rejected_with_path() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("/tmp/bad.tgck")).unwrap_err();
        assert!(err.to_string().contains("/tmp/bad.tgck"));

        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());

        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.tgck");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}
