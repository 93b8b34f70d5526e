//! MVOL: a minimal little-endian container for dense volumes.
//!
//! Layout: magic `MVOL`, `u32` version, `u8` dtype code (0 = f32, 1 = i16,
//! 2 = u8), `u8` rank, `u32` extents, `f32` spacing\[3\], payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum MvolData {
    F32(Vec<f32>),
    I16(Vec<i16>),
    U8(Vec<u8>),
}

impl MvolData {
    pub fn code(&self) -> u8 {
        match self {
            MvolData::F32(_) => 0,
            MvolData::I16(_) => 1,
            MvolData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MvolData::F32(v) => v.len(),
            MvolData::I16(v) => v.len(),
            MvolData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            MvolData::F32(v) => v.clone(),
            MvolData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            MvolData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mvol {
    pub extents: Vec<usize>,
    pub spacing: [f32; 3],
    pub data: MvolData,
}

fn format_err(field: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "MVOL",
        field,
        offset,
        message: message.into(),
    }
}

impl Mvol {
    pub fn new(extents: Vec<usize>, spacing: [f32; 3], data: MvolData) -> Result<Self> {
        if extents.is_empty() || extents.len() > u8::MAX as usize {
            return Err(Error::contract(format!(
                "MVOL rank {} unsupported",
                extents.len()
            )));
        }
        if extents.iter().any(|&e| e == 0 || e > u32::MAX as usize) {
            return Err(Error::contract(format!(
                "MVOL extents {extents:?} out of range"
            )));
        }
        let n: usize = extents.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "MVOL extents {extents:?} hold {n} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.extents.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.extents.len() as u8);
        for &e in &self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.data {
            MvolData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MvolData::I16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MvolData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err("magic", 0, "expected \"MVOL\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(
                "version",
                4,
                format!("unsupported version {version}"),
            ));
        }
        let code = r.take(1, "dtype")?[0];
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(format_err("rank", 9, "rank must be at least 1"));
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u32("extents")? as usize;
            if e == 0 {
                return Err(format_err("extents", at, "zero extent"));
            }
            extents.push(e);
        }
        let mut spacing = [0.0f32; 3];
        for s in &mut spacing {
            *s = f32::from_le_bytes(r.array("spacing")?);
        }
        let count = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| format_err("extents", 10, "voxel count overflows"))?;
        let payload_at = r.pos;
        let width = match code {
            0 => 4,
            1 => 2,
            2 => 1,
            other => {
                return Err(format_err(
                    "dtype",
                    8,
                    format!("unknown dtype code {other}"),
                ))
            }
        };
        let expected = count
            .checked_mul(width)
            .ok_or_else(|| format_err("extents", 10, "payload size overflows"))?;
        let payload = &bytes[payload_at.min(bytes.len())..];
        if payload.len() != expected {
            return Err(format_err(
                "payload",
                payload_at,
                format!("expected {expected} bytes, found {}", payload.len()),
            ));
        }
        let data = match code {
            0 => MvolData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            1 => MvolData::I16(
                payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().expect("2-byte chunk")))
                    .collect(),
            ),
            _ => MvolData::U8(payload.to_vec()),
        };
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err(field, self.pos, "file truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("exact length"))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Mvol> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Mvol::from_bytes(&bytes)
}

pub fn write_mvol(path: impl AsRef<Path>, volume: &Mvol) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}
