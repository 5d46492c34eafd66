//! Affine pre-alignment and diffeomorphic nonlinear registration driven by
//! local normalized cross-correlation, multi-resolution, with
//! guaranteed-invertible deformations (stationary velocity fields,
//! scaling-and-squaring).

mod affine;
mod diffeo;
mod lncc;
mod svf;

pub use affine::{register_affine, warp_affine, AffineResult, AffineTransform};
pub use diffeo::{register_diffeo, DiffeoResult};
pub use lncc::{lncc, lncc_gradient, lncc_intensity_gradient, spatial_gradient};
pub use svf::{compose_displacements, exponentiate, jacobian_determinant, smooth_field, squaring_steps_for};

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// Pyramid scale factors, strictly increasing, last must be 1.
    pub levels: Vec<f32>,
    /// Iteration count per pyramid level, same length as `levels`.
    pub iters_per_level: Vec<usize>,
    /// LNCC window radius in voxels.
    pub lncc_radius: usize,
    /// Update step length as a fraction of the minimum voxel spacing.
    pub step_voxels: f32,
    /// Gaussian sigma (voxels) applied to both the update and the total
    /// velocity field.
    pub field_smoothing_sigma: f32,
    /// Minimum number of scaling-and-squaring steps; raised adaptively so
    /// max |v|/2^N stays below half a voxel.
    pub min_squaring_steps: u32,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            levels: vec![1.0 / 6.0, 0.25, 0.5, 1.0],
            iters_per_level: vec![50, 25, 10, 10],
            lncc_radius: 3,
            step_voxels: 0.25,
            field_smoothing_sigma: 1.5,
            min_squaring_steps: 4,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(CoreError::InvalidParam("levels must be non-empty".into()));
        }
        for w in self.levels.windows(2) {
            if w[0] >= w[1] {
                return Err(CoreError::InvalidParam("levels must be strictly increasing".into()));
            }
        }
        if (self.levels.last().copied().unwrap() - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidParam("last level must be 1.0".into()));
        }
        if self.iters_per_level.len() != self.levels.len() {
            return Err(CoreError::InvalidParam(
                "iters_per_level must match levels in length".into(),
            ));
        }
        if self.lncc_radius < 1 {
            return Err(CoreError::InvalidParam("lncc_radius must be >= 1".into()));
        }
        Ok(())
    }
}
