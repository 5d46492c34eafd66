//! Unbiased subject-specific template estimation from n pre-filtered repeats,
//! and transport of the estimated deformations onto the raw repeats.

use crate::error::{CoreError, Result};
use crate::registration::{
    exponentiate, jacobian_determinant, register_affine, register_diffeo, spatial_gradient,
    squaring_steps_for, warp_affine, AffineTransform, DiffeoResult, RegistrationParams,
};
use crate::volume::{trilinear_sample, warp, FieldKind, VectorField3D, Volume3D};

#[derive(Debug, Clone)]
pub struct SubjectTemplate {
    pub template: Volume3D,
    pub affines: Vec<AffineTransform>,
    pub diffeos: Vec<DiffeoResult>,
    pub iterations_run: usize,
    /// Mean gradient magnitude of the template after each outer iteration.
    pub sharpness_history: Vec<f64>,
}

impl SubjectTemplate {
    /// Max magnitude (voxels) of the mean velocity over repeats; the
    /// unbiasedness proxy, ~0 after re-centering.
    pub fn mean_velocity_max_voxel_magnitude(&self) -> f32 {
        mean_velocity(&self.diffeos).max_voxel_magnitude()
    }

    pub fn min_jacobian(&self) -> f32 {
        self.diffeos
            .iter()
            .map(|d| d.min_jacobian)
            .fold(f32::INFINITY, f32::min)
    }
}

/// Mean gradient magnitude in physical units.
pub fn sharpness(vol: &Volume3D) -> f64 {
    let g = spatial_gradient(vol);
    g.data
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) as f64).sqrt())
        .sum::<f64>()
        / g.data.len() as f64
}

/// Voxelwise arithmetic mean of same-grid volumes, float64 accumulation.
pub fn voxelwise_mean(volumes: &[Volume3D]) -> Result<Volume3D> {
    let first = volumes
        .first()
        .ok_or_else(|| CoreError::InvalidParam("mean of zero volumes".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for v in volumes {
        if v.dims != first.dims {
            return Err(CoreError::DimMismatch {
                context: "voxelwise_mean",
                expected: first.dims,
                got: v.dims,
            });
        }
        for (a, &x) in acc.iter_mut().zip(&v.data) {
            *a += x as f64;
        }
    }
    let inv = 1.0 / volumes.len() as f64;
    Ok(Volume3D {
        dims: first.dims,
        spacing: first.spacing,
        data: acc.iter().map(|&a| (a * inv) as f32).collect(),
    })
}

fn mean_velocity(diffeos: &[DiffeoResult]) -> VectorField3D {
    let first = &diffeos[0].velocity;
    let mut mean = VectorField3D::zeros(first.dims, first.spacing, FieldKind::Velocity);
    let inv = 1.0 / diffeos.len() as f32;
    for d in diffeos {
        for (m, v) in mean.data.iter_mut().zip(&d.velocity.data) {
            m[0] += v[0] * inv;
            m[1] += v[1] * inv;
            m[2] += v[2] * inv;
        }
    }
    mean
}

fn rebuild_diffeo(velocity: VectorField3D, min_squaring: u32, similarity: f64) -> Result<DiffeoResult> {
    let n = squaring_steps_for(&velocity, min_squaring);
    let forward_disp = exponentiate(&velocity, n);
    let inverse_disp = exponentiate(&velocity.scaled(-1.0), n);
    let jac = jacobian_determinant(&forward_disp);
    let min_jacobian = jac.data.iter().copied().fold(f32::INFINITY, f32::min);
    if min_jacobian <= 0.0 {
        return Err(CoreError::RegistrationFailed(format!(
            "re-centered velocity lost diffeomorphism: min Jacobian {min_jacobian}"
        )));
    }
    Ok(DiffeoResult {
        velocity,
        forward_disp,
        inverse_disp,
        final_similarity: similarity,
        min_jacobian,
    })
}

/// Alternate template estimation and per-repeat diffeomorphic registration.
///
/// Inputs must already share one grid (affinely pre-aligned). Each outer
/// iteration registers every repeat to the current template, averages the
/// warped repeats, and re-centers: the mean velocity is subtracted from every
/// repeat's velocity and the template is composed with its negated
/// exponential, keeping the mean deformation near zero.
pub fn estimate_template(
    prefiltered: &[Volume3D],
    params: &RegistrationParams,
    outer_iters: usize,
) -> Result<SubjectTemplate> {
    if prefiltered.len() < 2 {
        return Err(CoreError::InvalidParam(format!(
            "template estimation needs >= 2 repeats, got {}",
            prefiltered.len()
        )));
    }
    let mut template = voxelwise_mean(prefiltered)?;
    let mut diffeos: Vec<DiffeoResult> = Vec::new();
    let mut sharpness_history = Vec::with_capacity(outer_iters);

    for _ in 0..outer_iters {
        diffeos = prefiltered
            .iter()
            .enumerate()
            .map(|(idx, rep)| {
                register_diffeo(&template, rep, params).map_err(|e| {
                    CoreError::TemplateMemberFailed {
                        repeat: idx,
                        source: Box::new(e),
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // re-center before averaging: subtract the mean velocity from every
        // repeat, then build the template from the re-centered warps so each
        // repeat is interpolated exactly once (warping the averaged template
        // by exp(-vbar) would cost a second interpolation pass)
        let vbar = mean_velocity(&diffeos);
        diffeos = diffeos
            .into_iter()
            .map(|d| {
                let mut vel = d.velocity;
                for (v, m) in vel.data.iter_mut().zip(&vbar.data) {
                    v[0] -= m[0];
                    v[1] -= m[1];
                    v[2] -= m[2];
                }
                rebuild_diffeo(vel, params.min_squaring_steps, d.final_similarity)
            })
            .collect::<Result<Vec<_>>>()?;
        let warped = prefiltered
            .iter()
            .zip(&diffeos)
            .map(|(rep, d)| warp(rep, &d.forward_disp))
            .collect::<Result<Vec<_>>>()?;
        template = voxelwise_mean(&warped)?;

        sharpness_history.push(sharpness(&template));
    }

    Ok(SubjectTemplate {
        template,
        affines: vec![AffineTransform::identity(); prefiltered.len()],
        diffeos,
        iterations_run: outer_iters,
        sharpness_history,
    })
}

/// Affine-align all repeats to the first repeat's grid, then estimate the
/// template. The returned `SubjectTemplate` records the per-repeat affines.
pub fn build_subject_template(
    prefiltered: &[Volume3D],
    params: &RegistrationParams,
    outer_iters: usize,
) -> Result<SubjectTemplate> {
    if prefiltered.len() < 2 {
        return Err(CoreError::InvalidParam(format!(
            "template estimation needs >= 2 repeats, got {}",
            prefiltered.len()
        )));
    }
    let reference = &prefiltered[0];
    let mut affines = vec![AffineTransform::identity()];
    let mut aligned = vec![reference.clone()];
    for rep in &prefiltered[1..] {
        let r = register_affine(reference, rep, params)?;
        aligned.push(warp_affine(rep, &r.transform, reference));
        affines.push(r.transform);
    }
    let mut st = estimate_template(&aligned, params, outer_iters)?;
    st.affines = affines;
    Ok(st)
}

/// Combined affine + diffeo resampling in a single interpolation pass:
/// `out(x) = raw(T(x + d(x)))`.
pub fn transport_one(
    raw: &Volume3D,
    affine: &AffineTransform,
    disp: &VectorField3D,
    grid: &Volume3D,
) -> Result<Volume3D> {
    if disp.kind != FieldKind::Displacement {
        return Err(CoreError::InvalidParam(
            "transport requires a Displacement field".into(),
        ));
    }
    if disp.dims != grid.dims {
        return Err(CoreError::DimMismatch {
            context: "transport_one",
            expected: grid.dims,
            got: disp.dims,
        });
    }
    let (nx, ny, nz) = grid.dims;
    let (sx, sy, sz) = grid.spacing;
    let c = grid.physical_center();
    let mut out = Volume3D::zeros(grid.dims, grid.spacing);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let d = disp.data[idx];
                let x = [
                    i as f32 * sx + d[0],
                    j as f32 * sy + d[1],
                    k as f32 * sz + d[2],
                ];
                out.data[idx] = trilinear_sample(raw, affine.apply(x, c));
            }
        }
    }
    Ok(out)
}

/// Apply each repeat's affine and forward deformation to its raw volume.
pub fn transport_warps(raw: &[Volume3D], st: &SubjectTemplate) -> Result<Vec<Volume3D>> {
    if raw.len() != st.diffeos.len() {
        return Err(CoreError::InvalidParam(format!(
            "raw volume count {} != template repeat count {}",
            raw.len(),
            st.diffeos.len()
        )));
    }
    raw.iter()
        .zip(st.affines.iter().zip(&st.diffeos))
        .map(|(r, (a, d))| transport_one(r, a, &d.forward_disp, &st.template))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_clean, random_diffeo, MotionSpec, PhantomSpec};

    fn quick_params() -> RegistrationParams {
        RegistrationParams {
            levels: vec![0.25, 0.5, 1.0],
            iters_per_level: vec![20, 10, 5],
            ..Default::default()
        }
    }

    fn small_phantom(seed: u64) -> Volume3D {
        generate_clean(&PhantomSpec {
            dims: (40, 40, 16),
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_repeats_give_the_input_back() {
        let v = small_phantom(1);
        let reps = vec![v.clone(), v.clone(), v.clone()];
        let st = estimate_template(&reps, &quick_params(), 1).unwrap();
        let max_diff = st
            .template
            .data
            .iter()
            .zip(&v.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-4, "template deviates by {max_diff}");
        for d in &st.diffeos {
            assert!(d.forward_disp.max_voxel_magnitude() < 0.1);
        }
    }

    #[test]
    fn mean_velocity_is_recentered() {
        let clean = small_phantom(2);
        let motion = MotionSpec {
            amplitude: 1.5,
            smoothness_sigma: 7.0,
            seed: 11,
        };
        let u = random_diffeo(clean.dims, clean.spacing, &motion).unwrap();
        let dp = exponentiate(&u, squaring_steps_for(&u, 4));
        let dm = exponentiate(&u.scaled(-1.0), squaring_steps_for(&u, 4));
        let reps = vec![warp(&clean, &dp).unwrap(), warp(&clean, &dm).unwrap()];
        let st = estimate_template(&reps, &quick_params(), 2).unwrap();
        assert!(
            st.mean_velocity_max_voxel_magnitude() < 0.1,
            "mean velocity {}",
            st.mean_velocity_max_voxel_magnitude()
        );
    }

    #[test]
    fn template_closer_to_unwarped_than_inputs() {
        let clean = small_phantom(3);
        let motion = MotionSpec {
            amplitude: 2.0,
            smoothness_sigma: 7.0,
            seed: 21,
        };
        let u = random_diffeo(clean.dims, clean.spacing, &motion).unwrap();
        let dp = exponentiate(&u, squaring_steps_for(&u, 4));
        let dm = exponentiate(&u.scaled(-1.0), squaring_steps_for(&u, 4));
        let a = warp(&clean, &dp).unwrap();
        let b = warp(&clean, &dm).unwrap();
        let st = estimate_template(&[a.clone(), b.clone()], &quick_params(), 2).unwrap();
        let mse = |x: &Volume3D| {
            x.data
                .iter()
                .zip(&clean.data)
                .map(|(p, q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                / x.data.len() as f64
        };
        let mt = mse(&st.template);
        assert!(
            mt < mse(&a) && mt < mse(&b),
            "template mse {mt} vs inputs {} / {}",
            mse(&a),
            mse(&b)
        );
    }

    #[test]
    fn estimate_rejects_single_repeat() {
        let v = small_phantom(4);
        assert!(estimate_template(&[v], &quick_params(), 1).is_err());
    }

    #[test]
    fn transport_identity_is_noop() {
        let v = small_phantom(5);
        let d = crate::volume::VectorField3D::zeros(v.dims, v.spacing, FieldKind::Displacement);
        let out = transport_one(&v, &AffineTransform::identity(), &d, &v).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn transport_count_mismatch_rejected() {
        let v = small_phantom(6);
        let reps = vec![v.clone(), v.clone()];
        let st = estimate_template(&reps, &quick_params(), 1).unwrap();
        assert!(transport_warps(&[v], &st).is_err());
    }

    #[test]
    fn transport_of_prefiltered_matches_registration_path() {
        // when raw == prefiltered and affine is identity, transport equals
        // warping the inputs by their forward displacements
        let clean = small_phantom(7);
        let motion = MotionSpec {
            amplitude: 1.0,
            smoothness_sigma: 8.0,
            seed: 31,
        };
        let u = random_diffeo(clean.dims, clean.spacing, &motion).unwrap();
        let dp = exponentiate(&u, squaring_steps_for(&u, 4));
        let a = warp(&clean, &dp).unwrap();
        let reps = vec![clean.clone(), a];
        let st = estimate_template(&reps, &quick_params(), 1).unwrap();
        let transported = transport_warps(&reps, &st).unwrap();
        for (t, (rep, d)) in transported.iter().zip(reps.iter().zip(&st.diffeos)) {
            let direct = warp(rep, &d.forward_disp).unwrap();
            let max_diff = t
                .data
                .iter()
                .zip(&direct.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-5, "paths differ by {max_diff}");
        }
    }

    #[test]
    fn single_pass_transport_differs_from_two_pass_on_high_frequency() {
        // structural check that the combined path really is one interpolation:
        // on high-frequency content it cannot match the twice-interpolated
        // two-pass result exactly
        let clean = small_phantom(8);
        let shift = AffineTransform {
            matrix: AffineTransform::identity().matrix,
            translation: [0.6, -0.4, 0.8],
        };
        let motion = MotionSpec {
            amplitude: 1.5,
            smoothness_sigma: 6.0,
            seed: 41,
        };
        let u = random_diffeo(clean.dims, clean.spacing, &motion).unwrap();
        let disp = exponentiate(&u, squaring_steps_for(&u, 4));
        let single = transport_one(&clean, &shift, &disp, &clean).unwrap();
        let two_pass = warp(&warp_affine(&clean, &shift, &clean), &disp).unwrap();
        let max_diff = single
            .data
            .iter()
            .zip(&two_pass.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "single-pass path appears to interpolate twice");
    }

    #[test]
    fn sharpness_orders_step_edges() {
        let mut sharp = Volume3D::zeros((16, 16, 8), (1.0, 1.0, 1.0));
        for k in 0..8 {
            for j in 0..16 {
                for i in 8..16 {
                    sharp.set(i, j, k, 1.0);
                }
            }
        }
        assert_eq!(sharpness(&Volume3D::constant((8, 8, 8), (1.0, 1.0, 1.0), 3.0)), 0.0);
        let blurred = crate::volume::gaussian_smooth(&sharp, [2.0, 2.0, 2.0]);
        assert!(sharpness(&sharp) > sharpness(&blurred));
    }
}
