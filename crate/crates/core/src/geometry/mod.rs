//! Oriented-box primitives and derived geometry.
//!
//! A [`Primitive`] is a 9-parameter oriented box: edge lengths, center
//! translation and per-axis Euler angles. Rotations compose extrinsically as
//! X-then-Y-then-Z, i.e. `R = Rz(theta_z) * Ry(theta_y) * Rx(theta_x)`; the
//! synthetic data generator uses the same convention, so the two never
//! disagree. Angles are wrapped to `(-pi, pi]` on construction.

pub mod io;

use crate::error::{Error, Result};
use std::f64::consts::{PI, TAU};

/// An oriented 3D box: edge lengths, center translation, Euler angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    lengths: [f64; 3],
    translation: [f64; 3],
    rotation: [f64; 3],
}

/// The 8 corners of a primitive in canonical sign order.
///
/// Corner `i` carries local-axis signs from the bits of `i`: bit 2 is the x
/// sign, bit 1 the y sign, bit 0 the z sign, with 0 meaning negative. The
/// order is therefore ---, --+, -+-, -++, +--, +-+, ++-, +++.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet {
    points: [[f64; 3]; 8],
}

/// Cubic region and resolution onto which primitives are rasterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Boolean occupancy raster over a [`GridSpec`], row-major over (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    spec: GridSpec,
    occupancy: Vec<bool>,
}

/// Wrap an angle to `(-pi, pi]`.
///
/// Values already in range are returned bit-identically, so negating an
/// in-range angle (as [`mirror`] does) stays an exact involution.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

impl Primitive {
    /// Builds a primitive, validating finiteness and positive lengths and
    /// wrapping the angles.
    pub fn new(lengths: [f64; 3], translation: [f64; 3], rotation: [f64; 3]) -> Result<Self> {
        for v in lengths.iter().chain(&translation).chain(&rotation) {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "primitive parameter must be finite, got {v}"
                )));
            }
        }
        if lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::invalid(format!(
                "edge lengths must be positive, got {lengths:?}"
            )));
        }
        Ok(Self {
            lengths,
            translation,
            rotation: [
                wrap_angle(rotation[0]),
                wrap_angle(rotation[1]),
                wrap_angle(rotation[2]),
            ],
        })
    }

    /// Builds a primitive from the flat 9-parameter layout
    /// `[l_x, l_y, l_z, t_x, t_y, t_z, theta_x, theta_y, theta_z]`.
    pub fn from_params(p: &[f64; 9]) -> Result<Self> {
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]])
    }

    /// Flat 9-parameter layout, inverse of [`Primitive::from_params`].
    pub fn params(&self) -> [f64; 9] {
        let l = self.lengths;
        let t = self.translation;
        let r = self.rotation;
        [l[0], l[1], l[2], t[0], t[1], t[2], r[0], r[1], r[2]]
    }

    pub fn lengths(&self) -> [f64; 3] {
        self.lengths
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn rotation(&self) -> [f64; 3] {
        self.rotation
    }

    /// Length of the box diagonal, `sqrt(l_x^2 + l_y^2 + l_z^2)`.
    pub fn diagonal_length(&self) -> f64 {
        let [x, y, z] = self.lengths;
        (x * x + y * y + z * z).sqrt()
    }

    /// Returns a copy translated by `d`.
    pub fn translated(&self, d: [f64; 3]) -> Primitive {
        Primitive {
            lengths: self.lengths,
            translation: [
                self.translation[0] + d[0],
                self.translation[1] + d[1],
                self.translation[2] + d[2],
            ],
            rotation: self.rotation,
        }
    }
}

/// Rotation matrix for extrinsic X-then-Y-then-Z Euler angles:
/// `R = Rz(theta_z) * Ry(theta_y) * Rx(theta_x)`.
pub fn rotation_matrix(rotation: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    if rotation.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "rotation angles must be finite, got {rotation:?}"
        )));
    }
    let (sx, cx) = rotation[0].sin_cos();
    let (sy, cy) = rotation[1].sin_cos();
    let (sz, cz) = rotation[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    Ok(mat_mul3(&mat_mul3(&rz, &ry), &rx))
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Applies `R * v`.
pub fn rotate_vec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Applies `R^T * v` (world-to-box for an orthonormal R).
fn rotate_vec_transposed(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
        r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
        r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
    ]
}

/// The 8 world-space corners of a primitive in canonical sign order.
pub fn corners(p: &Primitive) -> CornerSet {
    let r = rotation_matrix(p.rotation).expect("primitive invariant guarantees finite angles");
    let h = [p.lengths[0] / 2.0, p.lengths[1] / 2.0, p.lengths[2] / 2.0];
    let mut points = [[0.0; 3]; 8];
    for (i, point) in points.iter_mut().enumerate() {
        let local = [
            if i & 4 != 0 { h[0] } else { -h[0] },
            if i & 2 != 0 { h[1] } else { -h[1] },
            if i & 1 != 0 { h[2] } else { -h[2] },
        ];
        let w = rotate_vec(&r, local);
        *point = [
            p.translation[0] + w[0],
            p.translation[1] + w[1],
            p.translation[2] + w[2],
        ];
    }
    CornerSet { points }
}

impl CornerSet {
    pub fn points(&self) -> &[[f64; 3]; 8] {
        &self.points
    }

    pub fn from_points(points: [[f64; 3]; 8]) -> Self {
        Self { points }
    }

    /// Centroid of the 8 corners; coincides with the primitive translation.
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        [c[0] / 8.0, c[1] / 8.0, c[2] / 8.0]
    }
}

/// Reflection across the plane x = 0: negates `t_x`, `theta_y` and `theta_z`,
/// keeps lengths and `theta_x`.
pub fn mirror(p: &Primitive) -> Primitive {
    Primitive {
        lengths: p.lengths,
        translation: [-p.translation[0], p.translation[1], p.translation[2]],
        rotation: [
            p.rotation[0],
            wrap_angle(-p.rotation[1]),
            wrap_angle(-p.rotation[2]),
        ],
    }
}

/// Tightest zero-rotation box containing all corners of `p`.
pub fn obb_to_aabb(p: &Primitive) -> Primitive {
    let cs = corners(p);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for pt in cs.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(pt[a]);
            hi[a] = hi[a].max(pt[a]);
        }
    }
    Primitive {
        lengths: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        translation: [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ],
        rotation: [0.0; 3],
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            min: [-0.5; 3],
            max: [0.5; 3],
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        for a in 0..3 {
            if !(self.max[a] - self.min[a]).is_finite() || self.max[a] <= self.min[a] {
                return Err(Error::invalid(format!(
                    "grid extent must have positive side length on axis {a}"
                )));
            }
        }
        Ok(())
    }

    /// Center coordinate of voxel index `i` on axis `axis`.
    ///
    /// Computed as `mid + (2i + 1 - R) * side / (2R)` so that for an extent
    /// symmetric about 0 the centers of voxels `i` and `R-1-i` are exact
    /// floating-point negations of each other; the mirror/voxel-flip identity
    /// then holds bit-for-bit.
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        let r = self.resolution;
        let mid = (self.min[axis] + self.max[axis]) / 2.0;
        let q = (self.max[axis] - self.min[axis]) / (2.0 * r as f64);
        mid + (2.0 * i as f64 + 1.0 - r as f64) * q
    }
}

impl VoxelGrid {
    /// All-false grid over `spec`.
    pub fn empty(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.resolution * spec.resolution * spec.resolution;
        Ok(Self {
            spec,
            occupancy: vec![false; n],
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.spec.resolution;
        (x * r + y) * r + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = v;
    }

    pub fn count_occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v).count()
    }

    /// Grid with the x axis reversed (voxel x -> R-1-x).
    pub fn flip_x(&self) -> VoxelGrid {
        let r = self.spec.resolution;
        let mut out = VoxelGrid {
            spec: self.spec,
            occupancy: vec![false; self.occupancy.len()],
        };
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let v = self.get(x, y, z);
                    out.set(r - 1 - x, y, z, v);
                }
            }
        }
        out
    }
}

/// True when world point `c` lies inside the oriented box (inclusive faces).
pub fn point_in_box(p: &Primitive, r: &[[f64; 3]; 3], c: [f64; 3]) -> bool {
    let d = [
        c[0] - p.translation[0],
        c[1] - p.translation[1],
        c[2] - p.translation[2],
    ];
    let local = rotate_vec_transposed(r, d);
    local[0].abs() <= p.lengths[0] / 2.0
        && local[1].abs() <= p.lengths[1] / 2.0
        && local[2].abs() <= p.lengths[2] / 2.0
}

/// Rasterizes the union of oriented boxes: a voxel is occupied iff its center
/// lies inside at least one box.
///
/// An empty shape list is legal and produces an all-false grid (a warning is
/// logged). Rows are rasterized in parallel; every voxel is an independent
/// test, so the result is bit-identical to the sequential computation.
pub fn voxelize(shapes: &[Primitive], spec: &GridSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    let mut grid = VoxelGrid::empty(*spec)?;
    if shapes.is_empty() {
        log::warn!("voxelize called with no primitives; returning an empty grid");
        return Ok(grid);
    }
    let rotations: Vec<[[f64; 3]; 3]> = shapes
        .iter()
        .map(|p| rotation_matrix(p.rotation()).expect("primitive angles are finite"))
        .collect();
    let r = spec.resolution;
    let spec = *spec;
    use rayon::prelude::*;
    grid.occupancy
        .par_chunks_mut(r * r)
        .enumerate()
        .for_each(|(x, slab)| {
            let cx = spec.center(0, x);
            for y in 0..r {
                let cy = spec.center(1, y);
                for z in 0..r {
                    let c = [cx, cy, spec.center(2, z)];
                    let hit = shapes
                        .iter()
                        .zip(&rotations)
                        .any(|(p, rot)| point_in_box(p, rot, c));
                    slab[y * r + z] = hit;
                }
            }
        });
    Ok(grid)
}
