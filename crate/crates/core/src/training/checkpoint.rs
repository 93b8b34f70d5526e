//! VGCK: versioned little-endian container of named tensors.
//!
//! Layout: magic `VGCK`, `u32` version, `u64` config hash, `u32` record
//! count, then per record `u32` name length, UTF-8 name, `u8` dtype code
//! (0 = f32, 1 = f64), `u8` rank, `u32` extents, payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::volgrad::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"VGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub config_hash: u64,
    pub records: Vec<(String, Tensor<T>)>,
}

fn format_err(field: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "VGCK",
        field,
        offset,
        message: message.into(),
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn new(config_hash: u64) -> Self {
        Self {
            config_hash,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.records.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("checkpoint has no record {name:?}")))
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(
            name,
            Tensor::from_vec(&[1], vec![T::from_f64_lossy(value)]).expect("scalar"),
        );
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::shape("checkpoint scalar", t.shape(), &[1]));
        }
        Ok(t.data()[0].to_f64_lossy())
    }

    /// Stores every tensor of `store` under `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Overwrites `store` from records under `prefix`, which must match its
    /// names and shapes.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self.get(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "checkpoint restore",
                    store.get(id).shape(),
                    t.shape(),
                ));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(T::DTYPE));
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                match T::DTYPE {
                    DType::F32 => out.extend_from_slice(&(v.to_f32().expect("f32")).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&(v.to_f64().expect("f64")).to_le_bytes()),
                }
            }
        }
        out
    }

    /// Parses a checkpoint, rejecting it when `expected_hash` is given and
    /// differs from the stored one.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err("magic", 0, "expected \"VGCK\""));
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(format_err(
                "version",
                4,
                format!("unsupported version {version}"),
            ));
        }
        let config_hash = u64::from_le_bytes(r.array("config_hash")?);
        if let Some(want) = expected_hash {
            if want != config_hash {
                return Err(Error::config(
                    "config_hash",
                    format!("checkpoint was written for config {config_hash:016x}, this config is {want:016x}"),
                ));
            }
        }
        let count = u32::from_le_bytes(r.array("record_count")?) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array("name_length")?) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err("name", at, "record name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let code = r.take(1, "dtype")?[0];
            if code != dtype_code(T::DTYPE) {
                return Err(format_err(
                    "dtype",
                    at,
                    format!(
                        "record {name:?} has dtype code {code}, expected {}",
                        dtype_code(T::DTYPE)
                    ),
                ));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array("extents")?) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| format_err("extents", r.pos, "element count overflows"))?;
            let width = match T::DTYPE {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let at = r.pos;
            let payload = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| format_err("extents", at, "payload size overflows"))?,
                "payload",
            )?;
            let data: Vec<T> = match T::DTYPE {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| {
                        T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .expect("f32")
                    })
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| {
                        T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .expect("f64")
                    })
                    .collect(),
            };
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|e| format_err("extents", at, e.to_string()))?;
            records.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(format_err(
                "trailer",
                r.pos,
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            config_hash,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(field, self.pos, "file truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::new(0xDEAD_BEEF_0123_4567);
        c.push(
            "generator/w",
            Tensor::from_fn(&[2, 3], |i| i as f32 * -0.25),
        );
        c.push("crf/mu", Tensor::from_vec(&[1], vec![f32::NAN]).unwrap());
        c.push_scalar("trainer.epoch", 12.0);
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vgck");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path, Some(c.config_hash)).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.scalar("trainer.epoch").unwrap(), 12.0);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"VGCK");
    }

    #[test]
    fn hash_mismatch_rejected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::<f32>::from_bytes(&bytes, Some(1)).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref key, .. } if key == "config_hash"),
            "{err}"
        );
        assert!(Checkpoint::<f32>::from_bytes(&bytes, None).is_ok());
    }

    #[test]
    fn corrupt_files_give_structured_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 20, 30, bytes.len() - 1] {
            let err = Checkpoint::<f32>::from_bytes(&bytes[..cut], None).unwrap_err();
            assert!(
                matches!(err, Error::Format { format: "VGCK", .. }),
                "{cut}: {err}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad, None),
            Err(Error::Format { field: "magic", .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&extra, None),
            Err(Error::Format {
                field: "trailer",
                ..
            })
        ));
        let wide = Checkpoint::<f64>::from_bytes(&sample().to_bytes(), None).unwrap_err();
        assert!(matches!(wide, Error::Format { field: "dtype", .. }));
    }

    #[test]
    fn store_round_trip_checks_shapes() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::from_fn(&[3], |i| i as f64));
        let mut c = Checkpoint::new(0);
        c.push_store("m", &store);
        let mut other = ParamStore::<f64>::new();
        other.add("a", Tensor::zeros(&[3]));
        c.restore_store("m", &mut other).unwrap();
        assert_eq!(other, store);
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("a", Tensor::zeros(&[4]));
        assert!(c.restore_store("m", &mut wrong).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in prop::collection::vec(any::<u64>(), 1..40), hash in any::<u64>()) {
            let mut c = Checkpoint::<f64>::new(hash);
            c.push("x", Tensor::from_vec(&[values.len()], values.iter().map(|&b| f64::from_bits(b)).collect()).unwrap());
            let bytes = c.to_bytes();
            prop_assert_eq!(Checkpoint::<f64>::from_bytes(&bytes, Some(hash)).unwrap().to_bytes(), bytes);
        }
    }
}
