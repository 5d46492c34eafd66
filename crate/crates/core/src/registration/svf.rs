//! Stationary velocity field machinery: composition, scaling-and-squaring
//! exponentiation, Jacobian determinants, and vector field smoothing.

use crate::volume::{
    gaussian_smooth, trilinear_sample_vec, FieldKind, VectorField3D, Volume3D,
};

/// Composition of displacements: `(d1 ∘ d2)(x) = d2(x) + d1(x + d2(x))`.
pub fn compose_displacements(d1: &VectorField3D, d2: &VectorField3D) -> VectorField3D {
    assert_eq!(d1.dims, d2.dims);
    let (nx, ny, nz) = d1.dims;
    let (sx, sy, sz) = d1.spacing;
    let mut out = VectorField3D::zeros(d1.dims, d1.spacing, FieldKind::Displacement);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let a = d2.data[idx];
                let p = [
                    i as f32 * sx + a[0],
                    j as f32 * sy + a[1],
                    k as f32 * sz + a[2],
                ];
                let b = trilinear_sample_vec(d1, p);
                out.data[idx] = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            }
        }
    }
    out
}

/// Number of squaring steps so that `max |v| / 2^n` is below half a voxel,
/// never below `min_steps`.
pub fn squaring_steps_for(v: &VectorField3D, min_steps: u32) -> u32 {
    let mut n = min_steps;
    let max_vox = v.max_voxel_magnitude();
    while max_vox / (1u64 << n) as f32 >= 0.5 && n < 24 {
        n += 1;
    }
    n
}

/// Displacement of `exp(v)` by scaling-and-squaring: scale by 1/2^n, then
/// self-compose n times.
pub fn exponentiate(v: &VectorField3D, squaring_steps: u32) -> VectorField3D {
    let scale = 1.0 / (1u64 << squaring_steps) as f32;
    let mut d = v.scaled(scale).with_kind(FieldKind::Displacement);
    for _ in 0..squaring_steps {
        d = compose_displacements(&d, &d);
    }
    d
}

/// Per-voxel Jacobian determinant of `x -> x + d(x)`, central differences in
/// physical coordinates, one-sided at borders.
pub fn jacobian_determinant(d: &VectorField3D) -> Volume3D {
    let (nx, ny, nz) = d.dims;
    let (sx, sy, sz) = d.spacing;
    let mut out = Volume3D::zeros(d.dims, d.spacing);
    let get = |i: usize, j: usize, k: usize| d.data[i + nx * (j + ny * k)];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                // rows of J = I + grad(d); each row c differentiated along x,y,z
                let dx = |c: usize| -> f64 {
                    if nx == 1 {
                        0.0
                    } else if i == 0 {
                        ((get(1, j, k)[c] - get(0, j, k)[c]) / sx) as f64
                    } else if i == nx - 1 {
                        ((get(nx - 1, j, k)[c] - get(nx - 2, j, k)[c]) / sx) as f64
                    } else {
                        ((get(i + 1, j, k)[c] - get(i - 1, j, k)[c]) / (2.0 * sx)) as f64
                    }
                };
                let dy = |c: usize| -> f64 {
                    if ny == 1 {
                        0.0
                    } else if j == 0 {
                        ((get(i, 1, k)[c] - get(i, 0, k)[c]) / sy) as f64
                    } else if j == ny - 1 {
                        ((get(i, ny - 1, k)[c] - get(i, ny - 2, k)[c]) / sy) as f64
                    } else {
                        ((get(i, j + 1, k)[c] - get(i, j - 1, k)[c]) / (2.0 * sy)) as f64
                    }
                };
                let dz = |c: usize| -> f64 {
                    if nz == 1 {
                        0.0
                    } else if k == 0 {
                        ((get(i, j, 1)[c] - get(i, j, 0)[c]) / sz) as f64
                    } else if k == nz - 1 {
                        ((get(i, j, nz - 1)[c] - get(i, j, nz - 2)[c]) / sz) as f64
                    } else {
                        ((get(i, j, k + 1)[c] - get(i, j, k - 1)[c]) / (2.0 * sz)) as f64
                    }
                };
                let j00 = 1.0 + dx(0);
                let j01 = dy(0);
                let j02 = dz(0);
                let j10 = dx(1);
                let j11 = 1.0 + dy(1);
                let j12 = dz(1);
                let j20 = dx(2);
                let j21 = dy(2);
                let j22 = 1.0 + dz(2);
                let det = j00 * (j11 * j22 - j12 * j21) - j01 * (j10 * j22 - j12 * j20)
                    + j02 * (j10 * j21 - j11 * j20);
                out.data[i + nx * (j + ny * k)] = det as f32;
            }
        }
    }
    out
}

/// Component-wise Gaussian smoothing of a vector field, sigma in voxels.
pub fn smooth_field(field: &VectorField3D, sigma_vox: f32) -> VectorField3D {
    if sigma_vox <= 0.0 {
        return field.clone();
    }
    let sigma_phys = [
        sigma_vox * field.spacing.0,
        sigma_vox * field.spacing.1,
        sigma_vox * field.spacing.2,
    ];
    let mut out = field.clone();
    for c in 0..3 {
        let comp = Volume3D {
            dims: field.dims,
            spacing: field.spacing,
            data: field.data.iter().map(|v| v[c]).collect(),
        };
        let s = gaussian_smooth(&comp, sigma_phys);
        for (o, &v) in out.data.iter_mut().zip(&s.data) {
            o[c] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::trilinear_sample_vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> (usize, usize, usize) {
        (16, 16, 16)
    }

    #[test]
    fn exp_of_zero_is_zero() {
        let v = VectorField3D::zeros(dims(), (1.0, 1.0, 1.0), FieldKind::Velocity);
        let d = exponentiate(&v, 4);
        assert!(d.data.iter().all(|x| *x == [0.0, 0.0, 0.0]));
        assert_eq!(d.kind, FieldKind::Displacement);
    }

    #[test]
    fn exp_of_constant_is_translation_interior() {
        let c = [0.4f32, -0.3, 0.2];
        let mut v = VectorField3D::zeros(dims(), (1.0, 1.0, 1.0), FieldKind::Velocity);
        for e in &mut v.data {
            *e = c;
        }
        let d = exponentiate(&v, 4);
        let mag = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        for k in 3..13 {
            for j in 3..13 {
                for i in 3..13 {
                    let got = d.at(i, j, k);
                    for t in 0..3 {
                        assert!(
                            (got[t] - c[t]).abs() < 1e-3 * mag,
                            "({i},{j},{k})[{t}]: {} vs {}",
                            got[t],
                            c[t]
                        );
                    }
                }
            }
        }
    }

    fn smooth_random_velocity(seed: u64) -> VectorField3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = VectorField3D::zeros(dims(), (1.0, 1.0, 1.0), FieldKind::Velocity);
        for e in &mut v.data {
            *e = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
        }
        let mut v = smooth_field(&v, 2.5);
        let max = v.max_voxel_magnitude();
        let target = 1.5f32;
        for e in &mut v.data {
            for c in e.iter_mut() {
                *c *= target / max;
            }
        }
        v
    }

    #[test]
    fn exp_matches_euler_flow_oracle() {
        // independent oracle: integrate dx/dt = v(x) with 256 Euler steps
        // from a grid of interior seed points; compare endpoints.
        let v = smooth_random_velocity(42);
        let n_steps = 256;
        let dt = 1.0 / n_steps as f32;
        let d = exponentiate(&v, squaring_steps_for(&v, 4));
        let mut max_err = 0.0f32;
        for k in (4..12).step_by(2) {
            for j in (4..12).step_by(2) {
                for i in (4..12).step_by(2) {
                    let mut p = [i as f32, j as f32, k as f32];
                    for _ in 0..n_steps {
                        let vel = trilinear_sample_vec(&v, p);
                        p = [p[0] + dt * vel[0], p[1] + dt * vel[1], p[2] + dt * vel[2]];
                    }
                    let got = d.at(i, j, k);
                    let end = [
                        i as f32 + got[0],
                        j as f32 + got[1],
                        k as f32 + got[2],
                    ];
                    let err = ((end[0] - p[0]).powi(2)
                        + (end[1] - p[1]).powi(2)
                        + (end[2] - p[2]).powi(2))
                    .sqrt();
                    max_err = max_err.max(err);
                }
            }
        }
        assert!(max_err < 0.05, "max endpoint discrepancy {max_err}");
    }

    #[test]
    fn jacobian_of_zero_field_is_one() {
        let d = VectorField3D::zeros(dims(), (1.0, 1.0, 2.0), FieldKind::Displacement);
        let j = jacobian_determinant(&d);
        assert!(j.data.iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn jacobian_of_translation_is_one() {
        let mut d = VectorField3D::zeros(dims(), (1.0, 1.0, 1.0), FieldKind::Displacement);
        for e in &mut d.data {
            *e = [1.3, -0.7, 0.2];
        }
        let j = jacobian_determinant(&d);
        assert!(j.data.iter().all(|&x| (x - 1.0).abs() < 1e-5));
    }

    #[test]
    fn jacobian_of_linear_stretch() {
        // d(x) = (alpha * x, 0, 0) => det = 1 + alpha in the interior
        let alpha = 0.1f32;
        let (nx, ny, nz) = dims();
        let mut d = VectorField3D::zeros(dims(), (1.0, 1.0, 1.0), FieldKind::Displacement);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = d.idx(i, j, k);
                    d.data[idx] = [alpha * i as f32, 0.0, 0.0];
                }
            }
        }
        let det = jacobian_determinant(&d);
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    assert!((det.at(i, j, k) - (1.0 + alpha)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn inverse_consistency_of_exponentiate() {
        let v = smooth_random_velocity(17);
        let n = squaring_steps_for(&v, 4);
        let fwd = exponentiate(&v, n);
        let inv = exponentiate(&v.scaled(-1.0), n);
        let comp = compose_displacements(&fwd, &inv);
        let mut max_err = 0.0f32;
        let (nx, ny, nz) = comp.dims;
        for k in 3..nz - 3 {
            for j in 3..ny - 3 {
                for i in 3..nx - 3 {
                    let c = comp.at(i, j, k);
                    let err = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                    max_err = max_err.max(err);
                }
            }
        }
        assert!(max_err < 0.5, "forward-inverse residual {max_err}");
    }
}
