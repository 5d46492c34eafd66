//! Fundamental grid types: scalar volumes, vector fields, 2D slices,
//! interpolation, smoothing, resampling and pyramids.
//!
//! Voxel `(i, j, k)` sits at physical position `(i*sx, j*sy, k*sz)`.
//! Data is stored x-fastest: `index = i + nx*(j + ny*k)`.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Anisotropic 3D scalar grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(CoreError::InvalidParam(format!(
                "data length {} != nx*ny*nz = {}",
                data.len(),
                n
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(CoreError::InvalidParam(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn constant(dims: (usize, usize, usize), spacing: (f32, f32, f32), value: f32) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        Self::constant(dims, spacing, 0.0)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.idx(i, j, k);
        self.data[idx] = v;
    }

    /// Physical center of the grid (midpoint of voxel-center bounding box).
    pub fn physical_center(&self) -> [f32; 3] {
        [
            0.5 * (self.dims.0 as f32 - 1.0) * self.spacing.0,
            0.5 * (self.dims.1 as f32 - 1.0) * self.spacing.1,
            0.5 * (self.dims.2 as f32 - 1.0) * self.spacing.2,
        ]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    /// Extract the XY slice at index `z`.
    pub fn slice_xy(&self, z: usize) -> Slice2D {
        let (nx, ny, _) = self.dims;
        let base = nx * ny * z;
        Slice2D {
            dims: (nx, ny),
            data: self.data[base..base + nx * ny].to_vec(),
            provenance: None,
        }
    }

    /// Overwrite the XY slice at index `z`.
    pub fn set_slice_xy(&mut self, z: usize, s: &Slice2D) {
        let (nx, ny, _) = self.dims;
        assert_eq!(s.dims, (nx, ny));
        let base = nx * ny * z;
        self.data[base..base + nx * ny].copy_from_slice(&s.data);
    }
}

/// Tag distinguishing velocity fields from displacement fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Velocity,
    Displacement,
}

/// Per-voxel 3-vector grid in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField3D {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: Vec<[f32; 3]>,
    pub kind: FieldKind,
}

impl VectorField3D {
    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32), kind: FieldKind) -> Self {
        Self {
            dims,
            spacing,
            data: vec![[0.0; 3]; dims.0 * dims.1 * dims.2],
            kind,
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        self.data[self.idx(i, j, k)]
    }

    /// Max vector magnitude in voxel units (component / spacing per axis).
    pub fn max_voxel_magnitude(&self) -> f32 {
        let (sx, sy, sz) = self.spacing;
        self.data
            .iter()
            .map(|v| {
                let a = v[0] / sx;
                let b = v[1] / sy;
                let c = v[2] / sz;
                (a * a + b * b + c * c).sqrt()
            })
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .map(|v| [v[0] * factor, v[1] * factor, v[2] * factor])
                .collect(),
            kind: self.kind,
        }
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Where a 2D slice came from inside the acquisition set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceProvenance {
    pub subject: usize,
    pub repeat: usize,
    pub z: usize,
}

/// 2D scalar grid, typically one XY slice of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub dims: (usize, usize),
    pub data: Vec<f32>,
    pub provenance: Option<SliceProvenance>,
}

impl Slice2D {
    pub fn new(dims: (usize, usize), data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 {
            return Err(CoreError::InvalidParam(format!(
                "slice data length {} != nx*ny = {}",
                data.len(),
                dims.0 * dims.1
            )));
        }
        Ok(Self {
            dims,
            data,
            provenance: None,
        })
    }

    pub fn constant(dims: (usize, usize), value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.0 * dims.1],
            provenance: None,
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.dims.0 * j
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[self.idx(i, j)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Center crop to `size`x`size`.
    pub fn center_crop(&self, size: usize) -> Result<Slice2D> {
        let (nx, ny) = self.dims;
        if size > nx || size > ny {
            return Err(CoreError::InvalidParam(format!(
                "crop {size} exceeds slice dims {nx}x{ny}"
            )));
        }
        let x0 = (nx - size) / 2;
        let y0 = (ny - size) / 2;
        let mut data = Vec::with_capacity(size * size);
        for j in 0..size {
            let row = (y0 + j) * nx + x0;
            data.extend_from_slice(&self.data[row..row + size]);
        }
        Ok(Slice2D {
            dims: (size, size),
            data,
            provenance: self.provenance,
        })
    }
}

#[inline]
fn clamp_f(u: f32, hi: f32) -> f32 {
    u.max(0.0).min(hi)
}

/// Trilinear interpolation at a physical point with clamp-to-edge coordinates.
pub fn trilinear_sample(vol: &Volume3D, p: [f32; 3]) -> f32 {
    let (nx, ny, nz) = vol.dims;
    let u = clamp_f(p[0] / vol.spacing.0, (nx - 1) as f32);
    let v = clamp_f(p[1] / vol.spacing.1, (ny - 1) as f32);
    let w = clamp_f(p[2] / vol.spacing.2, (nz - 1) as f32);
    let i0 = (u.floor() as usize).min(nx - 1);
    let j0 = (v.floor() as usize).min(ny - 1);
    let k0 = (w.floor() as usize).min(nz - 1);
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let k1 = (k0 + 1).min(nz - 1);
    let fu = u - i0 as f32;
    let fv = v - j0 as f32;
    let fw = w - k0 as f32;

    let g = |i: usize, j: usize, k: usize| vol.data[i + nx * (j + ny * k)];
    let c00 = g(i0, j0, k0) * (1.0 - fu) + g(i1, j0, k0) * fu;
    let c10 = g(i0, j1, k0) * (1.0 - fu) + g(i1, j1, k0) * fu;
    let c01 = g(i0, j0, k1) * (1.0 - fu) + g(i1, j0, k1) * fu;
    let c11 = g(i0, j1, k1) * (1.0 - fu) + g(i1, j1, k1) * fu;
    let c0 = c00 * (1.0 - fv) + c10 * fv;
    let c1 = c01 * (1.0 - fv) + c11 * fv;
    c0 * (1.0 - fw) + c1 * fw
}

/// Trilinear interpolation of a vector field, component-wise, clamp-to-edge.
pub fn trilinear_sample_vec(field: &VectorField3D, p: [f32; 3]) -> [f32; 3] {
    let (nx, ny, nz) = field.dims;
    let u = clamp_f(p[0] / field.spacing.0, (nx - 1) as f32);
    let v = clamp_f(p[1] / field.spacing.1, (ny - 1) as f32);
    let w = clamp_f(p[2] / field.spacing.2, (nz - 1) as f32);
    let i0 = (u.floor() as usize).min(nx - 1);
    let j0 = (v.floor() as usize).min(ny - 1);
    let k0 = (w.floor() as usize).min(nz - 1);
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let k1 = (k0 + 1).min(nz - 1);
    let fu = u - i0 as f32;
    let fv = v - j0 as f32;
    let fw = w - k0 as f32;

    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let g = |i: usize, j: usize, k: usize| field.data[i + nx * (j + ny * k)][c];
        let c00 = g(i0, j0, k0) * (1.0 - fu) + g(i1, j0, k0) * fu;
        let c10 = g(i0, j1, k0) * (1.0 - fu) + g(i1, j1, k0) * fu;
        let c01 = g(i0, j0, k1) * (1.0 - fu) + g(i1, j0, k1) * fu;
        let c11 = g(i0, j1, k1) * (1.0 - fu) + g(i1, j1, k1) * fu;
        let c0 = c00 * (1.0 - fv) + c10 * fv;
        let c1 = c01 * (1.0 - fv) + c11 * fv;
        *o = c0 * (1.0 - fw) + c1 * fw;
    }
    out
}

/// Pull-back warp: `output(x) = vol(x + disp(x))`.
pub fn warp(vol: &Volume3D, disp: &VectorField3D) -> Result<Volume3D> {
    if disp.kind != FieldKind::Displacement {
        return Err(CoreError::InvalidParam(
            "warp requires a Displacement field, got Velocity".into(),
        ));
    }
    if vol.dims != disp.dims {
        return Err(CoreError::DimMismatch {
            context: "warp",
            expected: vol.dims,
            got: disp.dims,
        });
    }
    let (nx, ny, nz) = vol.dims;
    let (sx, sy, sz) = vol.spacing;
    let mut out = Volume3D::zeros(vol.dims, vol.spacing);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let d = disp.data[idx];
                let p = [
                    i as f32 * sx + d[0],
                    j as f32 * sy + d[1],
                    k as f32 * sz + d[2],
                ];
                out.data[idx] = trilinear_sample(vol, p);
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian smoothing with per-axis physical sigmas.
///
/// Kernel radius is ceil(3*sigma/spacing) per axis; truncated kernels are
/// renormalized near borders so constants are preserved exactly. Sigma 0 on
/// an axis skips that axis.
pub fn gaussian_smooth(vol: &Volume3D, sigma_phys: [f32; 3]) -> Volume3D {
    let mut out = vol.clone();
    let spacing = [vol.spacing.0, vol.spacing.1, vol.spacing.2];
    for axis in 0..3 {
        if sigma_phys[axis] > 0.0 {
            let sigma_vox = sigma_phys[axis] / spacing[axis];
            out = smooth_axis(&out, axis, sigma_vox);
        }
    }
    out
}

pub(crate) fn gaussian_kernel(sigma_vox: f32) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as usize;
    let s2 = 2.0 * (sigma_vox as f64) * (sigma_vox as f64);
    let mut k: Vec<f64> = (0..=radius)
        .map(|t| (-((t * t) as f64) / s2).exp())
        .collect();
    // normalized over the full symmetric stencil
    let sum: f64 = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    for w in &mut k {
        *w /= sum;
    }
    k
}

fn smooth_axis(vol: &Volume3D, axis: usize, sigma_vox: f32) -> Volume3D {
    let half = gaussian_kernel(sigma_vox);
    let radius = half.len() - 1;
    let (nx, ny, nz) = vol.dims;
    let dims = [nx, ny, nz];
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1isize,
        1 => nx as isize,
        _ => (nx * ny) as isize,
    };
    let mut out = Volume3D::zeros(vol.dims, vol.spacing);
    // iterate over all lines along `axis`
    let (da, db) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    for b in 0..db {
        for a in 0..da {
            let base = match axis {
                0 => nx * (a + ny * b),
                1 => a + nx * ny * b,
                _ => a + nx * b,
            } as isize;
            for t in 0..n {
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for off in -(radius as isize)..=(radius as isize) {
                    let src = t + off;
                    if src < 0 || src >= n {
                        continue;
                    }
                    let w = half[off.unsigned_abs()];
                    acc += w * vol.data[(base + src * stride) as usize] as f64;
                    wsum += w;
                }
                out.data[(base + t * stride) as usize] = (acc / wsum) as f32;
            }
        }
    }
    out
}

/// Resample to a new grid by trilinear interpolation, spacing preserved
/// extent-wise: `new_spacing = spacing * dim / new_dim`.
pub fn resample(vol: &Volume3D, new_dims: (usize, usize, usize)) -> Volume3D {
    let new_spacing = (
        vol.spacing.0 * vol.dims.0 as f32 / new_dims.0 as f32,
        vol.spacing.1 * vol.dims.1 as f32 / new_dims.1 as f32,
        vol.spacing.2 * vol.dims.2 as f32 / new_dims.2 as f32,
    );
    let mut out = Volume3D::zeros(new_dims, new_spacing);
    let (nx, ny, nz) = new_dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    i as f32 * new_spacing.0,
                    j as f32 * new_spacing.1,
                    k as f32 * new_spacing.2,
                ];
                out.data[i + nx * (j + ny * k)] = trilinear_sample(vol, p);
            }
        }
    }
    out
}

/// Resample a vector field to a new grid; vector values are physical so they
/// are interpolated unchanged.
pub fn resample_field(field: &VectorField3D, new_dims: (usize, usize, usize)) -> VectorField3D {
    let new_spacing = (
        field.spacing.0 * field.dims.0 as f32 / new_dims.0 as f32,
        field.spacing.1 * field.dims.1 as f32 / new_dims.1 as f32,
        field.spacing.2 * field.dims.2 as f32 / new_dims.2 as f32,
    );
    let mut out = VectorField3D::zeros(new_dims, new_spacing, field.kind);
    let (nx, ny, nz) = new_dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    i as f32 * new_spacing.0,
                    j as f32 * new_spacing.1,
                    k as f32 * new_spacing.2,
                ];
                out.data[i + nx * (j + ny * k)] = trilinear_sample_vec(field, p);
            }
        }
    }
    out
}

fn scaled_dims(dims: (usize, usize, usize), scale: f32) -> Result<(usize, usize, usize)> {
    let d = (
        (dims.0 as f32 * scale).round() as usize,
        (dims.1 as f32 * scale).round() as usize,
        (dims.2 as f32 * scale).round() as usize,
    );
    if d.0 < 2 || d.1 < 2 || d.2 < 2 {
        return Err(CoreError::InvalidParam(format!(
            "scale {scale} yields dims {d:?}; every axis must stay >= 2"
        )));
    }
    Ok(d)
}

/// One pyramid level: smooth with sigma = 0.5/scale voxels per axis, then
/// resample to round(dim*scale).
pub fn pyramid_level(vol: &Volume3D, scale: f32) -> Result<Volume3D> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(CoreError::InvalidParam(format!(
            "pyramid scale must lie in (0,1], got {scale}"
        )));
    }
    let new_dims = scaled_dims(vol.dims, scale)?;
    let sigma_vox = 0.5 / scale;
    let smoothed = gaussian_smooth(
        vol,
        [
            sigma_vox * vol.spacing.0,
            sigma_vox * vol.spacing.1,
            sigma_vox * vol.spacing.2,
        ],
    );
    Ok(resample(&smoothed, new_dims))
}

/// Halve every axis (one octave).
pub fn downsample2(vol: &Volume3D) -> Result<Volume3D> {
    pyramid_level(vol, 0.5)
}

/// Multi-resolution pyramid; `levels` are scale factors sorted coarse to fine.
pub fn build_pyramid(vol: &Volume3D, levels: &[f32]) -> Result<Vec<Volume3D>> {
    for w in levels.windows(2) {
        if w[0] >= w[1] {
            return Err(CoreError::InvalidParam(
                "pyramid levels must be strictly increasing (coarse to fine)".into(),
            ));
        }
    }
    levels.iter().map(|&s| pyramid_level(vol, s)).collect()
}
