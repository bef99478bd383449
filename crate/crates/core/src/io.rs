//! FDMP tensor dumps and 2-D map export.
//!
//! FDMP layout, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `FDMP`                           |
//! | 4      | 4    | version, `u32` = 1                     |
//! | 8      | 1    | dtype: 0 = `f32`, 1 = `f64`            |
//! | 9      | 3    | reserved, zero                         |
//! | 12     | 16   | dims `B, C, H, W` as four `u32`        |
//! | 28     | ...  | row-major payload, `B*C*H*W` elements  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const FDMP_MAGIC: &[u8; 4] = b"FDMP";
pub const FDMP_VERSION: u32 = 1;
pub const FDMP_HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn encode_fdmp(x: &FeatureMap, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FDMP_HEADER_LEN + x.len() * dtype.size());
    out.extend_from_slice(FDMP_MAGIC);
    out.extend_from_slice(&FDMP_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&[0, 0, 0]);
    for d in x.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidInput(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => x
            .as_slice()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => x
            .as_slice()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_fdmp(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < FDMP_HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated header: expected {FDMP_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != FDMP_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != FDMP_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dtype = match bytes[8] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(format_err(8, format!("unknown dtype {other}"))),
    };
    if let Some(i) = bytes[9..12].iter().position(|&b| b != 0) {
        return Err(format_err(9 + i, "reserved bytes must be zero"));
    }
    let mut dims = [0usize; 4];
    let mut count: usize = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let offset = 12 + 4 * i;
        *d = u32_at(bytes, offset) as usize;
        if *d == 0 {
            return Err(format_err(offset, "zero dimension"));
        }
        count = count
            .checked_mul(*d)
            .ok_or_else(|| format_err(offset, "element count overflows"))?;
    }
    let payload = &bytes[FDMP_HEADER_LEN..];
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(12, "payload size overflows"))?;
    if payload.len() != expected {
        let what = if payload.len() < expected {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(format_err(
            FDMP_HEADER_LEN + payload.len().min(expected),
            format!(
                "{what}: expected {expected} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(
            FDMP_HEADER_LEN + i * dtype.size(),
            format!("non-finite element {}", data[i]),
        ));
    }
    FeatureMap::new(dims, data)
}

pub fn write_fdmp(path: impl AsRef<Path>, x: &FeatureMap, dtype: DType) -> Result<()> {
    fs::write(path, encode_fdmp(x, dtype)?)?;
    Ok(())
}

pub fn read_fdmp(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_fdmp(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFormat {
    Pgm,
    Csv,
}

impl MapFormat {
    /// Picks the format from a `.pgm` or `.csv` extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(MapFormat::Pgm),
            "csv" => Some(MapFormat::Csv),
            _ => None,
        }
    }
}

fn check_plane(data: &[f64], height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || data.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} values cannot form a {height}x{width} map",
            data.len()
        )));
    }
    Ok(())
}

/// Binary PGM (P5), min-max scaled and inverted so larger values are darker.
pub fn encode_pgm(data: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    check_plane(data, height, width)?;
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| {
        let unit = if range > 0.0 { (v - lo) / range } else { 0.0 };
        (255.0 * (1.0 - unit)).round().clamp(0.0, 255.0) as u8
    }));
    Ok(out)
}

/// One line per map row, values in shortest round-trip decimal form.
pub fn encode_csv(data: &[f64], height: usize, width: usize) -> Result<String> {
    check_plane(data, height, width)?;
    Ok(data
        .chunks(width)
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn export_map(
    data: &[f64],
    height: usize,
    width: usize,
    path: impl AsRef<Path>,
    format: MapFormat,
) -> Result<()> {
    match format {
        MapFormat::Pgm => fs::write(path, encode_pgm(data, height, width)?)?,
        MapFormat::Csv => fs::write(path, encode_csv(data, height, width)?)?,
    }
    Ok(())
}
