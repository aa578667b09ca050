//! Binary scan files and image export.
//!
//! LSRS layout (all little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `LSRS`                              |
//! | 4..8         | u32 version (1)                           |
//! | 8..12        | u32 rows                                  |
//! | 12..16       | u32 cols                                  |
//! | 16..16+4rc   | f32 ranges in meters, row-major           |
//! | +64          | JSON intrinsics fragment, zero padded     |
//!
//! The JSON fragment carries the remaining intrinsics with short keys:
//! `{"fov":30,"ctr":0,"max":100,"min":0.3}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RangeImage, SensorIntrinsics};

pub const LSRS_MAGIC: &[u8; 4] = b"LSRS";
pub const LSRS_VERSION: u32 = 1;
const FRAGMENT_LEN: usize = 64;

#[derive(Serialize, Deserialize)]
struct IntrinsicsFragment {
    fov: f32,
    ctr: f32,
    max: f32,
    min: f32,
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated file: missing u32 at byte {at}")))
}

pub(crate) fn read_f32s(bytes: &[u8], at: usize, n: usize) -> Result<Vec<f32>> {
    let end = at + 4 * n;
    let raw = bytes
        .get(at..end)
        .ok_or_else(|| Error::Format(format!("truncated file: need {end} bytes, have {}", bytes.len())))?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_lsrs(img: &RangeImage) -> Result<Vec<u8>> {
    let intr = img.intrinsics();
    let mut out = Vec::with_capacity(16 + img.as_slice().len() * 4 + FRAGMENT_LEN);
    out.extend_from_slice(LSRS_MAGIC);
    out.extend_from_slice(&LSRS_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(img.cols() as u32).to_le_bytes());
    push_f32s(&mut out, img.as_slice());
    let fragment = serde_json::to_vec(&IntrinsicsFragment {
        fov: intr.v_fov_deg,
        ctr: intr.v_center_deg,
        max: intr.max_range_m,
        min: intr.min_range_m,
    })
    .map_err(|e| Error::json("encoding LSRS intrinsics", e))?;
    if fragment.len() > FRAGMENT_LEN {
        return Err(Error::Format(format!(
            "intrinsics fragment is {} bytes, limit {FRAGMENT_LEN}",
            fragment.len()
        )));
    }
    out.extend_from_slice(&fragment);
    out.resize(out.len() + FRAGMENT_LEN - fragment.len(), 0);
    Ok(out)
}

pub fn decode_lsrs(bytes: &[u8]) -> Result<RangeImage> {
    if bytes.get(0..4) != Some(LSRS_MAGIC.as_slice()) {
        return Err(Error::Format("missing LSRS magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != LSRS_VERSION {
        return Err(Error::Format(format!("unsupported LSRS version {version}")));
    }
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("LSRS dimensions overflow".into()))?;
    let data = read_f32s(bytes, 16, n)?;
    let frag_start = 16 + 4 * n;
    let frag = bytes
        .get(frag_start..frag_start + FRAGMENT_LEN)
        .ok_or_else(|| Error::Format("truncated LSRS intrinsics fragment".into()))?;
    let json_len = frag.iter().position(|&b| b == 0).unwrap_or(FRAGMENT_LEN);
    let f: IntrinsicsFragment = serde_json::from_slice(&frag[..json_len])
        .map_err(|e| Error::json("decoding LSRS intrinsics", e))?;
    let intrinsics = SensorIntrinsics {
        channels: rows,
        h_res: cols,
        v_fov_deg: f.fov,
        v_center_deg: f.ctr,
        max_range_m: f.max,
        min_range_m: f.min,
    };
    intrinsics
        .validate()
        .map_err(|e| Error::Format(format!("LSRS intrinsics: {e}")))?;
    RangeImage::new(intrinsics, data)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_lsrs(path: &Path, img: &RangeImage) -> Result<()> {
    write_file(path, &encode_lsrs(img)?)
}

pub fn read_lsrs(path: &Path) -> Result<RangeImage> {
    decode_lsrs(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Binary 16-bit PGM with range in millimeters, clamped to 65535.
pub fn encode_pgm16(img: &RangeImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.cols(), img.rows()).into_bytes();
    for &r in img.as_slice() {
        let mm = (r as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.display(), e))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}
