//! Affine pre-alignment by gradient ascent on LNCC.
//!
//! Transforms use pull-back semantics about the fixed grid's physical center:
//! the aligned image samples the moving image at `A(x - c) + c + t`.

use super::lncc::{lncc, lncc_intensity_gradient, spatial_gradient};
use super::RegistrationParams;
use crate::error::Result;
use crate::volume::{pyramid_level, trilinear_sample, Volume3D};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f32; 3]; 3],
    pub translation: [f32; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn det(&self) -> f32 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Sampling point for output position `x` about center `c`.
    #[inline]
    pub fn apply(&self, x: [f32; 3], c: [f32; 3]) -> [f32; 3] {
        let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let m = &self.matrix;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2] + c[0] + self.translation[0],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2] + c[1] + self.translation[1],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2] + c[2] + self.translation[2],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AffineResult {
    pub transform: AffineTransform,
    pub final_similarity: f64,
    /// False when the finest level never improved similarity (best-so-far
    /// transform is still returned).
    pub converged: bool,
}

/// Resample `moving` through `t` onto the grid of `grid` (dims/spacing), with
/// the transform centered on `grid`'s physical center.
pub fn warp_affine(moving: &Volume3D, t: &AffineTransform, grid: &Volume3D) -> Volume3D {
    let (nx, ny, nz) = grid.dims;
    let (sx, sy, sz) = grid.spacing;
    let c = grid.physical_center();
    let mut out = Volume3D::zeros(grid.dims, grid.spacing);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = [i as f32 * sx, j as f32 * sy, k as f32 * sz];
                out.data[i + nx * (j + ny * k)] = trilinear_sample(moving, t.apply(x, c));
            }
        }
    }
    out
}

/// Gradient of LNCC w.r.t. the 12 affine parameters, via the intensity
/// gradient chained with the warped image's spatial gradient.
fn affine_gradient(
    fixed: &Volume3D,
    warped: &Volume3D,
    radius: usize,
    center: [f32; 3],
) -> Result<([f64; 3], [[f64; 3]; 3])> {
    let gi = lncc_intensity_gradient(fixed, warped, radius)?;
    let gs = spatial_gradient(warped);
    let (nx, ny, nz) = fixed.dims;
    let (sx, sy, sz) = fixed.spacing;
    let mut gt = [0.0f64; 3];
    let mut ga = [[0.0f64; 3]; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let w = gi[idx];
                let g = gs.data[idx];
                let d = [
                    (i as f32 * sx - center[0]) as f64,
                    (j as f32 * sy - center[1]) as f64,
                    (k as f32 * sz - center[2]) as f64,
                ];
                for r in 0..3 {
                    let wg = w * g[r] as f64;
                    gt[r] += wg;
                    for cidx in 0..3 {
                        ga[r][cidx] += wg * d[cidx];
                    }
                }
            }
        }
    }
    Ok((gt, ga))
}

/// Multi-resolution gradient ascent on LNCC over matrix + translation, with
/// per-parameter scaling by the volume radius and step halving on similarity
/// decrease.
pub fn register_affine(
    fixed: &Volume3D,
    moving: &Volume3D,
    params: &RegistrationParams,
) -> Result<AffineResult> {
    params.validate()?;
    let mut t = AffineTransform::identity();
    let mut best = t;
    let mut best_sim = f64::NEG_INFINITY;
    let mut finest_improved = false;

    let n_levels = params.levels.len();
    for (li, (&scale, &iters)) in params
        .levels
        .iter()
        .zip(&params.iters_per_level)
        .enumerate()
    {
        let fixed_l = pyramid_level(fixed, scale)?;
        let moving_l = pyramid_level(moving, scale)?;
        let center = fixed_l.physical_center();
        // half-extent norm: converts matrix entries to physical-length scale
        let radius = (center[0] * center[0] + center[1] * center[1] + center[2] * center[2])
            .sqrt()
            .max(1.0) as f64;
        let min_spacing = fixed_l
            .spacing
            .0
            .min(fixed_l.spacing.1)
            .min(fixed_l.spacing.2) as f64;
        let mut step = 0.5 * min_spacing;
        let mut sim = lncc(&fixed_l, &warp_affine(&moving_l, &t, &fixed_l), params.lncc_radius)?;
        let finest = li == n_levels - 1;
        // similarity values are only comparable within one level; best-so-far
        // is tracked at the finest level
        if finest {
            best_sim = sim;
            best = t;
        }

        for _ in 0..iters {
            let warped = warp_affine(&moving_l, &t, &fixed_l);
            let (gt, ga) = affine_gradient(&fixed_l, &warped, params.lncc_radius, center)?;
            // per-parameter scaling: a matrix entry of size d moves points by
            // ~d*radius, so matrix gradients are normalized at the
            // volume-radius scale before taking a joint unit step
            let mut norm2 = 0.0f64;
            for v in gt {
                norm2 += v * v;
            }
            for row in &ga {
                for v in row {
                    let s = v / radius;
                    norm2 += s * s;
                }
            }
            let norm = norm2.sqrt();
            if norm == 0.0 {
                break;
            }
            // backtracking line search along the scaled gradient: halve the
            // step until similarity improves (and det stays positive)
            let mut accepted = false;
            while step > 1e-9 * min_spacing {
                let mut cand = t;
                for r in 0..3 {
                    cand.translation[r] += (step * gt[r] / norm) as f32;
                    for cix in 0..3 {
                        cand.matrix[r][cix] += (step * ga[r][cix] / (norm * radius * radius)) as f32;
                    }
                }
                if cand.det() > 0.0 {
                    let cand_sim = lncc(
                        &fixed_l,
                        &warp_affine(&moving_l, &cand, &fixed_l),
                        params.lncc_radius,
                    )?;
                    if cand_sim > sim {
                        t = cand;
                        sim = cand_sim;
                        accepted = true;
                        step = (step * 1.5).min(2.0 * min_spacing);
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                // no improving step along this gradient: level converged
                break;
            }
            if finest {
                finest_improved = true;
                if sim > best_sim {
                    best_sim = sim;
                    best = t;
                }
            }
        }
        if !finest {
            best = t;
        }
    }
    Ok(AffineResult {
        transform: best,
        final_similarity: best_sim,
        converged: finest_improved || best.is_identity(),
    })
}
