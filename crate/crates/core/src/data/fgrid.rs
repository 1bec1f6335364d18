//! `FGRD` single-frame container.
//!
//! Header: magic `FGRD`, version u32, dtype u8 (0 = f32, 1 = f64), n u32,
//! epoch i64, unit u8; then `n²` row-major values. Little-endian throughout.

use std::fs;
use std::path::Path;

use super::{Grid, Unit};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 22;
/// Largest accepted extent.
pub const MAX_EXTENT: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub n: usize,
    pub epoch: i64,
    pub unit: Unit,
}

pub fn encode(grid: &Grid, epoch: i64, unit: Unit, dtype: Dtype) -> Vec<u8> {
    let n = grid.n();
    let mut out = Vec::with_capacity(HEADER_LEN + n * n * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match dtype {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    });
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.push(unit.tag());
    match dtype {
        Dtype::F32 => grid
            .values()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => grid
            .values()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    let bad = |reason: String| Err(Error::format("fgrid", reason));
    if bytes.len() < HEADER_LEN {
        return bad(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return bad("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return bad(format!("unsupported version {version}"));
    }
    let dtype = match bytes[8] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        t => return bad(format!("unknown dtype tag {t}")),
    };
    let n = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if n == 0 || n > MAX_EXTENT {
        return bad(format!("extent {n} out of range"));
    }
    let epoch = i64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let Some(unit) = Unit::from_tag(bytes[21]) else {
        return bad(format!("unknown unit tag {}", bytes[21]));
    };
    Ok(Header {
        dtype,
        n,
        epoch,
        unit,
    })
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Grid)> {
    let header = decode_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.n * header.n * header.dtype.width();
    if payload.len() != expected {
        return Err(Error::format(
            "fgrid",
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let values = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((header, Grid::new(header.n, values)?))
}

pub fn save_grid(path: &Path, grid: &Grid, epoch: i64, unit: Unit, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(grid, epoch, unit, dtype)).map_err(Error::at(path))
}

pub fn load_grid(path: &Path) -> Result<(Header, Grid)> {
    decode(&fs::read(path).map_err(Error::at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let g = Grid::from_fn(5, |r, c| ((r * 5 + c) as f64).sin() * 1e-3 - 0.0);
        let bytes = encode(&g, -1_234_567, Unit::MmPerHour, Dtype::F64);
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(
            h,
            Header {
                dtype: Dtype::F64,
                n: 5,
                epoch: -1_234_567,
                unit: Unit::MmPerHour
            }
        );
        let bits = |g: &Grid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g), bits(&back));
    }

    #[test]
    fn file_size_matches_dtype() {
        let g = Grid::filled(7, 0.0);
        assert_eq!(
            encode(&g, 0, Unit::Mm, Dtype::F32).len(),
            HEADER_LEN + 4 * 49
        );
        assert_eq!(
            encode(&g, 0, Unit::Mm, Dtype::F64).len(),
            HEADER_LEN + 8 * 49
        );
    }

    #[test]
    fn f32_stores_representable_values_exactly() {
        let g = Grid::from_fn(3, |r, c| (r as f64) * 0.5 - c as f64);
        let (_, back) = decode(&encode(&g, 0, Unit::Normalized, Dtype::F32)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn corruption_is_a_typed_error() {
        let bytes = encode(&Grid::filled(2, 1.0), 0, Unit::Mm, Dtype::F64);
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Format { .. })));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(decode(&bytes[..10]).is_err());
        let mut tag = bytes.clone();
        tag[21] = 7;
        assert!(decode(&tag).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
