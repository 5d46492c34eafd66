//! Synthetic layered phantoms, random diffeomorphic motion, and noise models
//! used as ground truth for validation.
//!
//! Phantoms are retina-like: smooth sinusoidal layer boundary surfaces stacked
//! along y, with dark vessel-like ellipsoids embedded. All generators are
//! seed-deterministic.

use crate::error::{CoreError, Result};
use crate::registration::{exponentiate, jacobian_determinant, smooth_field, squaring_steps_for};
use crate::volume::{warp, FieldKind, VectorField3D, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    /// Number of intensity layers stacked along y.
    pub layer_count: usize,
    /// Sinusoidal boundary amplitude in voxels.
    pub boundary_amplitude: f32,
    /// Boundary frequency in cycles across the volume.
    pub boundary_frequency: f32,
    /// Vessel-like dark ellipsoid count.
    pub vessel_count: usize,
    /// Vessel semi-axis range in voxels.
    pub vessel_radius: (f32, f32),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (96, 96, 32),
            spacing: (1.0, 1.0, 2.0),
            layer_count: 6,
            boundary_amplitude: 3.0,
            boundary_frequency: 1.5,
            vessel_count: 5,
            vessel_radius: (2.0, 5.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Maximum velocity magnitude in voxels.
    pub amplitude: f32,
    /// Gaussian smoothing sigma of the random field, in voxels.
    pub smoothness_sigma: f32,
    pub seed: u64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            amplitude: 3.0,
            smoothness_sigma: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub enum NoiseModel {
    /// Zero-mean additive Gaussian with the given sigma (intensity units).
    AdditiveGaussian { sigma: f32 },
    /// Mean-one multiplicative Gamma(shape, 1/shape) speckle.
    MultiplicativeSpeckle { shape: f32 },
    /// Speckle followed by additive Gaussian.
    Mixed { sigma: f32, shape: f32 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            model: NoiseModel::AdditiveGaussian { sigma: 0.1 },
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self.model {
            NoiseModel::AdditiveGaussian { sigma } if sigma < 0.0 => Err(CoreError::InvalidParam(
                format!("noise sigma must be >= 0, got {sigma}"),
            )),
            NoiseModel::MultiplicativeSpeckle { shape } | NoiseModel::Mixed { shape, .. }
                if shape <= 0.0 =>
            {
                Err(CoreError::InvalidParam(format!(
                    "speckle shape must be > 0, got {shape}"
                )))
            }
            NoiseModel::Mixed { sigma, .. } if sigma < 0.0 => Err(CoreError::InvalidParam(
                format!("noise sigma must be >= 0, got {sigma}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Layer boundary height at (x, z) for boundary index `l` (between layer l-1
/// and l).
fn boundary_height(spec: &PhantomSpec, phases: &[(f32, f32)], l: usize, x: f32, z: f32) -> f32 {
    let (nx, ny, nz) = spec.dims;
    let base = ny as f32 * l as f32 / spec.layer_count as f32;
    let (phi, psi) = phases[l];
    let f = spec.boundary_frequency;
    base + spec.boundary_amplitude
        * (std::f32::consts::TAU * f * x / nx as f32 + phi).sin()
        * (std::f32::consts::TAU * f * z / nz as f32 + psi).cos()
}

/// Deterministic layered phantom with smooth boundaries and dark ellipsoids.
pub fn generate_clean(spec: &PhantomSpec) -> Result<Volume3D> {
    let (nx, ny, nz) = spec.dims;
    if spec.layer_count == 0 {
        return Err(CoreError::InvalidParam("layer_count must be >= 1".into()));
    }
    let gap = ny as f32 / spec.layer_count as f32;
    if 2.0 * spec.boundary_amplitude >= gap {
        return Err(CoreError::InvalidParam(format!(
            "boundary amplitude {} too large for layer gap {gap}",
            spec.boundary_amplitude
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // alternating bright/dark bands with jitter keeps adjacent contrast high
    let intensities: Vec<f32> = (0..spec.layer_count)
        .map(|l| {
            let base = if l % 2 == 0 { 0.7 } else { 0.3 };
            (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)
        })
        .collect();
    let phases: Vec<(f32, f32)> = (0..=spec.layer_count)
        .map(|_| {
            (
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    struct Vessel {
        c: [f32; 3],
        r: [f32; 3],
    }
    let vessels: Vec<Vessel> = (0..spec.vessel_count)
        .map(|_| Vessel {
            c: [
                rng.gen_range(0.0..nx as f32),
                rng.gen_range(0.0..ny as f32),
                rng.gen_range(0.0..nz as f32),
            ],
            r: [
                rng.gen_range(spec.vessel_radius.0..=spec.vessel_radius.1),
                rng.gen_range(spec.vessel_radius.0..=spec.vessel_radius.1),
                rng.gen_range(spec.vessel_radius.0..=spec.vessel_radius.1),
            ],
        })
        .collect();

    // verify strict boundary ordering on the grid
    for l in 1..spec.layer_count {
        for z in 0..nz {
            for x in 0..nx {
                let lo = boundary_height(spec, &phases, l, x as f32, z as f32);
                let hi = boundary_height(spec, &phases, l + 1, x as f32, z as f32);
                if lo >= hi {
                    return Err(CoreError::InvalidParam(format!(
                        "layer boundaries {l} and {} cross at x={x}, z={z}",
                        l + 1
                    )));
                }
            }
        }
    }

    // soft edge over ~1.5 voxels keeps gradients informative after warping
    let edge = 1.5f32;
    let mut v = Volume3D::zeros(spec.dims, spec.spacing);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = i as f32;
                let y = j as f32;
                let z = k as f32;
                // blend of layer intensities using sigmoid boundary weights
                let mut val = intensities[0];
                for l in 1..spec.layer_count {
                    let b = boundary_height(spec, &phases, l, x, z);
                    let w = 1.0 / (1.0 + (-(y - b) / edge).exp());
                    val += (intensities[l] - intensities[l - 1]) * w;
                }
                for ves in &vessels {
                    let dx = (x - ves.c[0]) / ves.r[0];
                    let dy = (y - ves.c[1]) / ves.r[1];
                    let dz = (z - ves.c[2]) / ves.r[2];
                    if dx * dx + dy * dy + dz * dz < 1.0 {
                        val *= 0.35;
                    }
                }
                v.set(i, j, k, val);
            }
        }
    }
    Ok(v)
}

/// Smooth seeded random velocity field rescaled to the requested max voxel
/// magnitude; its exponential is checked diffeomorphic.
pub fn random_diffeo(
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    spec: &MotionSpec,
) -> Result<VectorField3D> {
    if spec.amplitude < 0.0 {
        return Err(CoreError::InvalidParam("motion amplitude must be >= 0".into()));
    }
    let mut field = VectorField3D::zeros(dims, spacing, FieldKind::Velocity);
    if spec.amplitude == 0.0 {
        return Ok(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for e in &mut field.data {
        // voxel-unit noise converted to physical units per axis
        *e = [
            rng.gen_range(-1.0..1.0f32) * spacing.0,
            rng.gen_range(-1.0..1.0f32) * spacing.1,
            rng.gen_range(-1.0..1.0f32) * spacing.2,
        ];
    }
    let mut field = smooth_field(&field, spec.smoothness_sigma);
    let max = field.max_voxel_magnitude();
    if max > 0.0 {
        // rescale so max voxel magnitude equals the amplitude
        let s = spec.amplitude / max;
        for e in &mut field.data {
            e[0] *= s;
            e[1] *= s;
            e[2] *= s;
        }
    }
    let disp = exponentiate(&field, squaring_steps_for(&field, 4));
    let jac = jacobian_determinant(&disp);
    let min_jac = jac.data.iter().copied().fold(f32::INFINITY, f32::min);
    if min_jac <= 0.1 {
        return Err(CoreError::InvalidParam(format!(
            "generated motion is too aggressive: min Jacobian {min_jac}"
        )));
    }
    Ok(field)
}

/// Apply one noise realization.
pub fn apply_noise(vol: &Volume3D, spec: &NoiseSpec, realization: u64) -> Result<Volume3D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ realization);
    let mut out = vol.clone();
    match spec.model {
        NoiseModel::AdditiveGaussian { sigma } => {
            if sigma > 0.0 {
                let n = Normal::new(0.0f64, sigma as f64).unwrap();
                for v in &mut out.data {
                    *v += n.sample(&mut rng) as f32;
                }
            }
        }
        NoiseModel::MultiplicativeSpeckle { shape } => {
            let g = Gamma::new(shape as f64, 1.0 / shape as f64).unwrap();
            for v in &mut out.data {
                *v *= g.sample(&mut rng) as f32;
            }
        }
        NoiseModel::Mixed { sigma, shape } => {
            let g = Gamma::new(shape as f64, 1.0 / shape as f64).unwrap();
            let n = Normal::new(0.0f64, sigma.max(f32::MIN_POSITIVE) as f64).unwrap();
            for v in &mut out.data {
                *v = *v * g.sample(&mut rng) as f32 + n.sample(&mut rng) as f32;
            }
        }
    }
    Ok(out)
}

/// Build `n` noisy deformed repeats of `clean` plus their ground-truth
/// displacement fields.
pub fn make_repeats(
    clean: &Volume3D,
    n: usize,
    motion: &MotionSpec,
    noise: &NoiseSpec,
) -> Result<(Vec<Volume3D>, Vec<VectorField3D>)> {
    let mut repeats = Vec::with_capacity(n);
    let mut fields = Vec::with_capacity(n);
    for r in 0..n {
        let m = MotionSpec {
            seed: motion.seed.wrapping_mul(1000).wrapping_add(r as u64),
            ..*motion
        };
        let vel = random_diffeo(clean.dims, clean.spacing, &m)?;
        let disp = exponentiate(&vel, squaring_steps_for(&vel, 4));
        let deformed = warp(clean, &disp)?;
        let noisy = apply_noise(&deformed, noise, r as u64)?;
        repeats.push(noisy);
        fields.push(disp);
    }
    Ok((repeats, fields))
}

/// Foreground mask: voxels with non-negligible clean-image gradient, where
/// registration is actually constrained.
pub fn foreground_mask(clean: &Volume3D, threshold: f32) -> Vec<bool> {
    let g = crate::registration::spatial_gradient(clean);
    g.data
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() > threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_no_vessels_is_constant() {
        let spec = PhantomSpec {
            dims: (16, 16, 8),
            layer_count: 1,
            vessel_count: 0,
            ..Default::default()
        };
        let v = generate_clean(&spec).unwrap();
        let first = v.data[0];
        assert!(v.data.iter().all(|&x| x == first));
        assert!((0.0..=1.0).contains(&first));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = PhantomSpec {
            dims: (24, 24, 8),
            layer_count: 4,
            boundary_amplitude: 1.0,
            seed: 99,
            ..Default::default()
        };
        let a = generate_clean(&spec).unwrap();
        let b = generate_clean(&spec).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn boundary_ordering_holds_for_many_seeds() {
        for seed in 0..100 {
            let spec = PhantomSpec {
                dims: (24, 24, 8),
                layer_count: 4,
                boundary_amplitude: 1.0,
                seed,
                ..Default::default()
            };
            assert!(generate_clean(&spec).is_ok(), "seed {seed}");
        }
    }

    #[test]
    fn zero_amplitude_motion_is_zero_field() {
        let spec = MotionSpec {
            amplitude: 0.0,
            ..Default::default()
        };
        let f = random_diffeo((16, 16, 8), (1.0, 1.0, 2.0), &spec).unwrap();
        assert!(f.data.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn motion_fields_are_diffeomorphic_across_seeds() {
        for seed in 0..50 {
            let spec = MotionSpec {
                seed,
                ..Default::default()
            };
            let f = random_diffeo((32, 32, 12), (1.0, 1.0, 2.0), &spec).unwrap();
            let disp = exponentiate(&f, squaring_steps_for(&f, 4));
            let jac = jacobian_determinant(&disp);
            let min = jac.data.iter().copied().fold(f32::INFINITY, f32::min);
            assert!(min > 0.1, "seed {seed}: min jac {min}");
        }
    }

    #[test]
    fn motion_is_seed_deterministic_and_scaled() {
        let spec = MotionSpec {
            seed: 4,
            ..Default::default()
        };
        let a = random_diffeo((24, 24, 8), (1.0, 1.0, 2.0), &spec).unwrap();
        let b = random_diffeo((24, 24, 8), (1.0, 1.0, 2.0), &spec).unwrap();
        assert_eq!(a.data, b.data);
        let max = a.max_voxel_magnitude();
        assert!((max - spec.amplitude).abs() < 1e-3, "max {max}");
    }

    #[test]
    fn zero_motion_zero_noise_gives_identical_copies() {
        let clean = generate_clean(&PhantomSpec {
            dims: (16, 16, 8),
            layer_count: 4,
            boundary_amplitude: 1.0,
            ..Default::default()
        })
        .unwrap();
        let motion = MotionSpec {
            amplitude: 0.0,
            ..Default::default()
        };
        let noise = NoiseSpec {
            model: NoiseModel::AdditiveGaussian { sigma: 0.0 },
            seed: 0,
        };
        let (reps, fields) = make_repeats(&clean, 3, &motion, &noise).unwrap();
        for r in &reps {
            assert_eq!(r.data, clean.data);
        }
        for f in &fields {
            assert!(f.data.iter().all(|v| *v == [0.0; 3]));
        }
    }

    #[test]
    fn additive_noise_matches_spec_sigma_and_mean() {
        let clean = generate_clean(&PhantomSpec::default()).unwrap();
        let noise = NoiseSpec {
            model: NoiseModel::AdditiveGaussian { sigma: 0.1 },
            seed: 7,
        };
        let noisy = apply_noise(&clean, &noise, 0).unwrap();
        let resid: Vec<f64> = noisy
            .data
            .iter()
            .zip(&clean.data)
            .map(|(a, b)| (a - b) as f64)
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let (lo, hi) = clean.min_max();
        let range = (hi - lo) as f64;
        assert!(mean.abs() < 0.002 * range, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.002, "sigma {}", var.sqrt());
    }

    #[test]
    fn speckle_noise_has_mean_one() {
        let clean = Volume3D::constant((48, 48, 32), (1.0, 1.0, 1.0), 1.0);
        let noise = NoiseSpec {
            model: NoiseModel::MultiplicativeSpeckle { shape: 4.0 },
            seed: 3,
        };
        let noisy = apply_noise(&clean, &noise, 0).unwrap();
        let mean = noisy.data.iter().map(|&v| v as f64).sum::<f64>() / noisy.data.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn noise_realizations_are_independent_across_repeats() {
        let clean = generate_clean(&PhantomSpec {
            dims: (48, 48, 16),
            ..Default::default()
        })
        .unwrap();
        let motion = MotionSpec {
            amplitude: 0.0,
            ..Default::default()
        };
        let noise = NoiseSpec::default();
        let (reps, _) = make_repeats(&clean, 4, &motion, &noise).unwrap();
        let resid: Vec<Vec<f64>> = reps
            .iter()
            .map(|r| {
                r.data
                    .iter()
                    .zip(&clean.data)
                    .map(|(a, b)| (a - b) as f64)
                    .collect()
            })
            .collect();
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (x, y) in a.iter().zip(b) {
                cov += (x - ma) * (y - mb);
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
            }
            cov / (va * vb).sqrt()
        };
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..resid.len() {
            for j in i + 1..resid.len() {
                total += corr(&resid[i], &resid[j]).abs();
                count += 1;
            }
        }
        assert!(total / (count as f64) < 0.02);
    }
}
