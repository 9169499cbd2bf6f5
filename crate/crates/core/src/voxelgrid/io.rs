//! Grid persistence.
//!
//! `PVOX1` layout (little-endian):
//!
//! | bytes  | field                                            |
//! |--------|--------------------------------------------------|
//! | 0..8   | magic `PVOX1\0\0\0`                              |
//! | 8..12  | `u32` edge length                                |
//! | 12..16 | `u32` flags, bit 0: 0 = binary, 1 = scalar       |
//! | 16..   | payload                                          |
//!
//! Binary payloads are `u32` run lengths alternating empty/occupied, starting
//! with an empty run (possibly zero). Scalar payloads are `size³` `f32` values.
//! Both follow the grid's x-major order.
//!
//! Plain-text grids (`.txt`) hold the size on the first line followed by one
//! `x y z` line per occupied voxel.

use std::fs;
use std::path::Path;

use super::grid::VoxelGrid;
use crate::error::{format_err, invalid, Error, Result};

pub const MAGIC: &[u8; 8] = b"PVOX1\0\0\0";
const HEADER_LEN: usize = 16;
const FLAG_SCALAR: u32 = 1;
const MAX_SIZE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Run-length encoded `{0, 1}` occupancy.
    Binary,
    /// Raw `f32` values.
    Scalar,
}

/// Binary when every value is 0 or 1, scalar otherwise.
pub fn natural_encoding(grid: &VoxelGrid) -> Encoding {
    if grid.is_binary() {
        Encoding::Binary
    } else {
        Encoding::Scalar
    }
}

pub fn encode_pvox(grid: &VoxelGrid, encoding: Encoding) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(grid.size() as u32).to_le_bytes());
    match encoding {
        Encoding::Binary => {
            if !grid.is_binary() {
                return Err(invalid("binary encoding requires a {0,1} grid"));
            }
            out.extend_from_slice(&0u32.to_le_bytes());
            let mut occupied = false;
            let mut run = 0u32;
            for &v in grid.values() {
                if (v == 1.0) == occupied {
                    run += 1;
                } else {
                    out.extend_from_slice(&run.to_le_bytes());
                    occupied = !occupied;
                    run = 1;
                }
            }
            out.extend_from_slice(&run.to_le_bytes());
        }
        Encoding::Scalar => {
            out.extend_from_slice(&FLAG_SCALAR.to_le_bytes());
            for &v in grid.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "truncated: expected a u32"))
}

pub fn decode_pvox(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "magic mismatch: not a PVOX1 file"));
    }
    let size = read_u32(bytes, 8)? as usize;
    let flags = read_u32(bytes, 12)?;
    if size == 0 || size > MAX_SIZE {
        return Err(format_err(8, format!("grid size {size} out of range 1..={MAX_SIZE}")));
    }
    if flags & !FLAG_SCALAR != 0 {
        return Err(format_err(12, format!("unknown flag bits {flags:#x}")));
    }
    let n = size * size * size;
    let payload = &bytes[HEADER_LEN..];
    let data = if flags & FLAG_SCALAR != 0 {
        if payload.len() != n * 4 {
            return Err(format_err(
                HEADER_LEN + payload.len().min(n * 4),
                format!(
                    "scalar payload holds {} bytes, size {size} needs {}",
                    payload.len(),
                    n * 4
                ),
            ));
        }
        payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect::<Vec<_>>()
    } else {
        let mut data = Vec::with_capacity(n);
        let mut offset = HEADER_LEN;
        let mut occupied = false;
        while data.len() < n {
            let run = read_u32(bytes, offset).map_err(|_| {
                format_err(
                    offset,
                    format!("truncated run-length payload: decoded {} of {n} voxels", data.len()),
                )
            })? as usize;
            if data.len() + run > n {
                return Err(format_err(
                    offset,
                    format!("run of {run} overflows the {n}-voxel grid"),
                ));
            }
            data.resize(data.len() + run, if occupied { 1.0 } else { 0.0 });
            occupied = !occupied;
            offset += 4;
        }
        if offset != bytes.len() {
            return Err(format_err(offset, "trailing bytes after a complete payload"));
        }
        data
    };
    VoxelGrid::from_values(size, data).map_err(|e| format_err(HEADER_LEN, e.to_string()))
}

pub fn encode_text(grid: &VoxelGrid) -> Result<String> {
    if !grid.is_binary() {
        return Err(invalid("text grids hold binary occupancy only"));
    }
    let mut s = format!("{}\n", grid.size());
    for [x, y, z] in grid.occupied_voxels() {
        s.push_str(&format!("{x} {y} {z}\n"));
    }
    Ok(s)
}

pub fn decode_text(text: &str) -> Result<VoxelGrid> {
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| format_err(0, "empty text grid"))?;
    let size: usize = first
        .trim()
        .parse()
        .map_err(|_| format_err(0, format!("expected grid size, found {:?}", first.trim())))?;
    if size == 0 || size > MAX_SIZE {
        return Err(format_err(0, format!("grid size {size} out of range 1..={MAX_SIZE}")));
    }
    offset += first.len();
    let mut grid = VoxelGrid::empty(size);
    for line in lines {
        let t = line.trim();
        if !t.is_empty() {
            let coords: Vec<usize> = t
                .split_whitespace()
                .map(|v| v.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format_err(offset, format!("bad voxel line {t:?}")))?;
            match coords[..] {
                [x, y, z] if x < size && y < size && z < size => grid.set(x, y, z, 1.0),
                _ => return Err(format_err(offset, format!("bad voxel line {t:?}"))),
            }
        }
        offset += line.len();
    }
    Ok(grid)
}

fn is_text_path(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("txt"))
}

/// Reads a PVOX1 file, or a text grid when the file lacks the magic and ends in `.txt`.
pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) || !is_text_path(path) {
        return decode_pvox(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|e| format_err(e.utf8_error().valid_up_to(), "text grid is not UTF-8"))?;
    decode_text(&text)
}

/// Writes a grid, choosing the format from the extension and the encoding from the values.
pub fn write_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_text_path(path) {
        return fs::write(path, encode_text(grid)?).map_err(Error::from);
    }
    write_grid_as(grid, path, natural_encoding(grid))
}

pub fn write_grid_as(grid: &VoxelGrid, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    fs::write(path, encode_pvox(grid, encoding)?).map_err(Error::from)
}
