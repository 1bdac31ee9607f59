//! Text formats for primitives, voxel grids and OBJ meshes.
//!
//! Primitive golden files carry one primitive per line: a semantic label
//! integer followed by the 9 box parameters, printed with 17 significant
//! digits so the f64 values round-trip exactly. Voxel grids use a `vox R` header followed by R^3 `0`/`1`
//! characters in row-major (x, y, z) order; line breaks are cosmetic.

use super::{corners, GridSpec, Primitive, VoxelGrid};
use crate::error::{Error, Result};
use std::fmt::Write as _;

/// Serializes labeled primitives in the 10-field-per-line golden format.
pub fn write_primitive_lines(prims: &[(u32, Primitive)]) -> String {
    let mut out = String::new();
    for (label, p) in prims {
        let v = p.params();
        let _ = write!(out, "{label}");
        for x in v {
            let _ = write!(out, " {x:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Parses the 10-field-per-line golden format.
pub fn read_primitive_lines(text: &str) -> Result<Vec<(u32, Primitive)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(Error::Parse(format!(
                "line {}: expected 10 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let label: u32 = fields[0]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: bad label: {e}", lineno + 1)))?;
        let mut params = [0.0; 9];
        for (i, f) in fields[1..].iter().enumerate() {
            params[i] = f
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad number: {e}", lineno + 1)))?;
        }
        out.push((label, Primitive::from_params(&params)?));
    }
    Ok(out)
}

/// Serializes a voxel grid as `vox R` plus R^3 occupancy characters.
pub fn write_vox_text(grid: &VoxelGrid) -> String {
    let r = grid.resolution();
    let mut out = String::with_capacity(8 + r * r * (r + 1));
    let _ = writeln!(out, "vox {r}");
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                out.push(if grid.get(x, y, z) { '1' } else { '0' });
            }
            out.push('\n');
        }
    }
    out
}

/// Parses the `vox R` text format produced by [`write_vox_text`].
pub fn read_vox_text(text: &str, spec_extent: Option<&GridSpec>) -> Result<VoxelGrid> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty vox file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("vox") {
        return Err(Error::Parse("vox file must start with 'vox R'".into()));
    }
    let r: usize = parts
        .next()
        .ok_or_else(|| Error::Parse("vox header missing resolution".into()))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad vox resolution: {e}")))?;
    let spec = match spec_extent {
        Some(s) if s.resolution == r => *s,
        Some(s) => {
            return Err(Error::shape(format!(
                "vox file resolution {r} does not match requested {}",
                s.resolution
            )))
        }
        None => GridSpec::with_resolution(r),
    };
    let mut grid = VoxelGrid::empty(spec)?;
    let mut filled = 0usize;
    let total = r * r * r;
    for line in lines {
        for ch in line.chars() {
            if ch.is_whitespace() {
                continue;
            }
            if filled >= total {
                return Err(Error::Parse("vox file has too many cells".into()));
            }
            let v = match ch {
                '0' => false,
                '1' => true,
                other => return Err(Error::Parse(format!("bad vox character {other:?}"))),
            };
            let z = filled % r;
            let y = (filled / r) % r;
            let x = filled / (r * r);
            grid.set(x, y, z, v);
            filled += 1;
        }
    }
    if filled != total {
        return Err(Error::Parse(format!(
            "vox file has {filled} cells, expected {total}"
        )));
    }
    Ok(grid)
}

// Triangles over the canonical corner order (bit 2 = x sign, bit 1 = y sign,
// bit 0 = z sign), wound counter-clockwise seen from outside the box.
const BOX_TRIANGLES: [[usize; 3]; 12] = [
    [0, 1, 3],
    [0, 3, 2], // -x face
    [4, 6, 7],
    [4, 7, 5], // +x face
    [0, 4, 5],
    [0, 5, 1], // -y face
    [2, 3, 7],
    [2, 7, 6], // +y face
    [0, 2, 6],
    [0, 6, 4], // -z face
    [1, 5, 7],
    [1, 7, 3], // +z face
];

/// Serializes labeled primitives as a Wavefront OBJ mesh: 8 vertices and 12
/// triangles per primitive, grouped and named by semantic label.
pub fn write_obj(prims: &[(u32, Primitive)]) -> String {
    let mut out = String::new();
    if prims.is_empty() {
        out.push_str("# empty shape: no primitives\n");
        return out;
    }
    for (i, (label, p)) in prims.iter().enumerate() {
        let _ = writeln!(out, "g part_{i}_label_{label}");
        let cs = corners(p);
        for pt in cs.points() {
            let _ = writeln!(out, "v {:.9e} {:.9e} {:.9e}", pt[0], pt[1], pt[2]);
        }
        let base = i * 8 + 1; // OBJ indices are 1-based
        for tri in &BOX_TRIANGLES {
            let _ = writeln!(
                out,
                "f {} {} {}",
                base + tri[0],
                base + tri[1],
                base + tri[2]
            );
        }
    }
    out
}

/// Reads back the vertex list of an OBJ file (groups/faces ignored).
pub fn read_obj_vertices(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let mut v = [0.0; 3];
        for x in &mut v {
            *x = parts
                .next()
                .ok_or_else(|| Error::Parse("vertex line with fewer than 3 coords".into()))?
                .parse()
                .map_err(|e| Error::Parse(format!("bad vertex coordinate: {e}")))?;
        }
        out.push(v);
    }
    Ok(out)
}
