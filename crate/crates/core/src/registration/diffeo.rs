//! Diffeomorphic registration with a stationary velocity field, optimized by
//! smoothed LNCC gradient ascent across a resolution pyramid.

use super::lncc::{lncc, lncc_gradient};
use super::svf::{exponentiate, jacobian_determinant, smooth_field, squaring_steps_for};
use super::RegistrationParams;
use crate::error::{CoreError, Result};
use crate::volume::{pyramid_level, resample_field, warp, FieldKind, VectorField3D, Volume3D};

#[derive(Debug, Clone)]
pub struct DiffeoResult {
    pub velocity: VectorField3D,
    pub forward_disp: VectorField3D,
    pub inverse_disp: VectorField3D,
    pub final_similarity: f64,
    pub min_jacobian: f32,
}

/// Register `moving` (already affinely aligned) to `fixed`.
///
/// Per level: resample both, then iterate (exponentiate + warp, LNCC ascent
/// direction, smooth the update, step, smooth the total velocity). The
/// velocity is upsampled between levels. Fails hard if the converged forward
/// displacement has a non-positive Jacobian determinant anywhere.
pub fn register_diffeo(
    fixed: &Volume3D,
    moving: &Volume3D,
    params: &RegistrationParams,
) -> Result<DiffeoResult> {
    params.validate()?;
    if fixed.dims != moving.dims {
        return Err(CoreError::DimMismatch {
            context: "register_diffeo",
            expected: fixed.dims,
            got: moving.dims,
        });
    }

    let mut velocity: Option<VectorField3D> = None;
    for (&scale, &iters) in params.levels.iter().zip(&params.iters_per_level) {
        let fixed_l = pyramid_level(fixed, scale)?;
        let moving_l = pyramid_level(moving, scale)?;
        let mut v = match velocity.take() {
            Some(prev) => {
                let mut f = resample_field(&prev, fixed_l.dims);
                f.spacing = fixed_l.spacing;
                f
            }
            None => VectorField3D::zeros(fixed_l.dims, fixed_l.spacing, FieldKind::Velocity),
        };
        let min_spacing = fixed_l
            .spacing
            .0
            .min(fixed_l.spacing.1)
            .min(fixed_l.spacing.2);
        let step = params.step_voxels * min_spacing;

        for _ in 0..iters {
            let n = squaring_steps_for(&v, params.min_squaring_steps);
            let disp = exponentiate(&v, n);
            let warped = warp(&moving_l, &disp)?;
            let grad = lncc_gradient(&fixed_l, &warped, params.lncc_radius)?;
            let mut update = smooth_field(&grad, params.field_smoothing_sigma);
            let max_mag = update
                .data
                .iter()
                .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
                .fold(0.0f32, f32::max);
            // the step is normalized by max_mag, which would blow floating-
            // point noise up to a full step on already-aligned images; LNCC
            // ascent directions this small are pure roundoff, so stop instead
            if max_mag <= 1e-8 {
                break;
            }
            let s = step / max_mag;
            for (ve, ue) in v.data.iter_mut().zip(&update.data) {
                ve[0] += s * ue[0];
                ve[1] += s * ue[1];
                ve[2] += s * ue[2];
            }
            update.data.clear();
            v = smooth_field(&v, params.field_smoothing_sigma).with_kind(FieldKind::Velocity);
        }
        velocity = Some(v);
    }

    let velocity = velocity.expect("at least one pyramid level");
    let n = squaring_steps_for(&velocity, params.min_squaring_steps);
    let forward_disp = exponentiate(&velocity, n);
    let inverse_disp = exponentiate(&velocity.scaled(-1.0), n);
    let jac = jacobian_determinant(&forward_disp);
    let min_jacobian = jac.data.iter().copied().fold(f32::INFINITY, f32::min);
    if min_jacobian <= 0.0 {
        return Err(CoreError::RegistrationFailed(format!(
            "non-diffeomorphic result: min Jacobian determinant {min_jacobian} <= 0 \
             (max |v| = {:.3} voxels, squaring steps {n})",
            velocity.max_voxel_magnitude()
        )));
    }
    let final_similarity = lncc(fixed, &warp(moving, &forward_disp)?, params.lncc_radius)?;
    Ok(DiffeoResult {
        velocity,
        forward_disp,
        inverse_disp,
        final_similarity,
        min_jacobian,
    })
}
