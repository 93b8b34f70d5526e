//! Read-only subset of NIfTI-1: uncompressed single-file `.nii`, three
//! dimensions, float32 / int16 / uint8 voxels, either byte order.

use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    /// `[nz, ny, nx]`; x varies fastest in the payload.
    pub extents: [usize; 3],
    /// Millimetres per voxel along the extents' axes.
    pub spacing: [f32; 3],
    pub datatype: i16,
    /// Voxel values after `scl_slope` / `scl_inter` scaling.
    pub data: Vec<f32>,
}

fn format_err(field: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "NIfTI-1",
        field,
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Header<'_> {
    fn word<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut w: [u8; N] = self.bytes[offset..offset + N]
            .try_into()
            .expect("in header");
        if self.big_endian {
            w.reverse();
        }
        w
    }

    fn i16(&self, offset: usize) -> i16 {
        i16::from_le_bytes(self.word(offset))
    }

    fn f32(&self, offset: usize) -> f32 {
        f32::from_le_bytes(self.word(offset))
    }
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(
            "header",
            bytes.len(),
            format!(
                "file truncated: {} of {HEADER_SIZE} header bytes",
                bytes.len()
            ),
        ));
    }
    let raw: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let big_endian = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(format_err(
            "sizeof_hdr",
            0,
            "expected 348 in either byte order",
        ));
    };
    let h = Header { bytes, big_endian };
    if &bytes[344..348] != b"n+1\0" {
        return Err(format_err("magic", 344, "expected single-file \"n+1\""));
    }
    let rank = h.i16(40);
    if rank != 3 {
        return Err(format_err(
            "dim",
            40,
            format!("dim[0] = {rank}, only 3D volumes are supported"),
        ));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let v = h.i16(42 + 2 * k);
        if v <= 0 {
            return Err(format_err(
                "dim",
                42 + 2 * k,
                format!("dim[{}] = {v} must be positive", k + 1),
            ));
        }
        *d = v as usize;
    }
    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(format_err(
                "datatype",
                70,
                format!("unsupported datatype code {other}"),
            ))
        }
    };
    let bitpix = h.i16(72);
    if bitpix as usize != 8 * width {
        return Err(format_err(
            "bitpix",
            72,
            format!("{bitpix} disagrees with datatype {datatype}"),
        ));
    }
    let pixdim = [h.f32(80), h.f32(84), h.f32(88)];
    let vox_offset = h.f32(108);
    if vox_offset.is_nan() || vox_offset < 352.0 || vox_offset.fract() != 0.0 {
        return Err(format_err(
            "vox_offset",
            108,
            format!("{vox_offset} is not a valid data offset"),
        ));
    }
    let start = vox_offset as usize;
    let count = dims.iter().product::<usize>();
    let end = start + count * width;
    if bytes.len() < end {
        return Err(format_err(
            "payload",
            start,
            format!(
                "expected {} bytes, found {}",
                count * width,
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let payload = &bytes[start..end];
    let word = |c: &[u8]| -> [u8; 4] {
        let mut w: [u8; 4] = c.try_into().expect("4 bytes");
        if big_endian {
            w.reverse();
        }
        w
    };
    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let pair = [c[0], c[1]];
                (if big_endian {
                    i16::from_be_bytes(pair)
                } else {
                    i16::from_le_bytes(pair)
                }) as f32
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(word(c)))
            .collect(),
    };
    let (slope, inter) = (h.f32(112), h.f32(116));
    if slope != 0.0 && slope.is_finite() {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiImage {
        extents: [dims[2], dims[1], dims[0]],
        spacing: [pixdim[2], pixdim[1], pixdim[0]].map(|p| if p > 0.0 { p } else { 1.0 }),
        datatype,
        data,
    })
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}
