//! Local normalized cross-correlation and its first variation.
//!
//! The metric is the mean over voxels of the windowed Pearson correlation in
//! cubic windows, windows truncated at the borders, float64 accumulation
//! throughout. Windows with variance below a small floor contribute 0.

use crate::error::{CoreError, Result};
use crate::volume::{FieldKind, VectorField3D, Volume3D};

const VAR_FLOOR: f64 = 1e-10;

/// Box sum along one axis with window [t-r, t+r] clipped to the line, via
/// per-line prefix sums.
fn box_sum_axis(dims: (usize, usize, usize), data: &mut Vec<f64>, axis: usize, r: usize) {
    let (nx, ny, nz) = dims;
    let n = match axis {
        0 => nx,
        1 => ny,
        _ => nz,
    };
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let (da, db) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let mut prefix = vec![0.0f64; n + 1];
    let mut line = vec![0.0f64; n];
    for b in 0..db {
        for a in 0..da {
            let base = match axis {
                0 => nx * (a + ny * b),
                1 => a + nx * ny * b,
                _ => a + nx * b,
            };
            for t in 0..n {
                prefix[t + 1] = prefix[t] + data[base + t * stride];
            }
            for t in 0..n {
                let lo = t.saturating_sub(r);
                let hi = (t + r + 1).min(n);
                line[t] = prefix[hi] - prefix[lo];
            }
            for t in 0..n {
                data[base + t * stride] = line[t];
            }
        }
    }
}

fn box_sum(dims: (usize, usize, usize), src: &[f64], r: usize) -> Vec<f64> {
    let mut d = src.to_vec();
    for axis in 0..3 {
        box_sum_axis(dims, &mut d, axis, r);
    }
    d
}

/// Per-voxel window sizes for clipped cubic windows.
fn window_counts(dims: (usize, usize, usize), r: usize) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let count_1d = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|t| ((t + r + 1).min(n) - t.saturating_sub(r)) as f64)
            .collect()
    };
    let cx = count_1d(nx);
    let cy = count_1d(ny);
    let cz = count_1d(nz);
    let mut out = vec![0.0; nx * ny * nz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out[i + nx * (j + ny * k)] = cx[i] * cy[j] * cz[k];
            }
        }
    }
    out
}

struct WindowStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    cov: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
}

fn window_stats(a: &Volume3D, b: &Volume3D, r: usize) -> WindowStats {
    let dims = a.dims;
    let n = a.data.len();
    let af: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();
    let sa = box_sum(dims, &af, r);
    let sb = box_sum(dims, &bf, r);
    let saa = box_sum(dims, &aa, r);
    let sbb = box_sum(dims, &bb, r);
    let sab = box_sum(dims, &ab, r);
    let m = window_counts(dims, r);
    let mut st = WindowStats {
        mu_a: vec![0.0; n],
        mu_b: vec![0.0; n],
        cov: vec![0.0; n],
        var_a: vec![0.0; n],
        var_b: vec![0.0; n],
    };
    for i in 0..n {
        let mu_a = sa[i] / m[i];
        let mu_b = sb[i] / m[i];
        st.mu_a[i] = mu_a;
        st.mu_b[i] = mu_b;
        st.cov[i] = sab[i] - m[i] * mu_a * mu_b;
        st.var_a[i] = saa[i] - m[i] * mu_a * mu_a;
        st.var_b[i] = sbb[i] - m[i] * mu_b * mu_b;
    }
    st
}

fn check_dims(a: &Volume3D, b: &Volume3D, context: &'static str) -> Result<()> {
    if a.dims != b.dims {
        return Err(CoreError::DimMismatch {
            context,
            expected: a.dims,
            got: b.dims,
        });
    }
    Ok(())
}

/// Mean windowed Pearson correlation in [-1, 1].
pub fn lncc(a: &Volume3D, b: &Volume3D, radius: usize) -> Result<f64> {
    check_dims(a, b, "lncc")?;
    let st = window_stats(a, b, radius);
    let n = a.data.len();
    let mut total = 0.0f64;
    for i in 0..n {
        if st.var_a[i] > VAR_FLOOR && st.var_b[i] > VAR_FLOOR {
            total += st.cov[i] / (st.var_a[i] * st.var_b[i]).sqrt();
        }
    }
    Ok(total / n as f64)
}

/// Derivative of `lncc(a, b, radius)` with respect to each intensity of `b`.
///
/// For window x containing voxel y,
/// d rho(x)/d b(y) = p(x) * (a(y) - mu_a(x)) - q(x) * (b(y) - mu_b(x))
/// with p = 1/sqrt(va*vb) and q = cov/(vb*sqrt(va*vb)); the total is the box
/// sum over windows (window membership is symmetric), divided by voxel count.
pub fn lncc_intensity_gradient(a: &Volume3D, b: &Volume3D, radius: usize) -> Result<Vec<f64>> {
    check_dims(a, b, "lncc_gradient")?;
    let dims = a.dims;
    let n = a.data.len();
    let st = window_stats(a, b, radius);
    let mut p = vec![0.0f64; n];
    let mut q = vec![0.0f64; n];
    let mut p_mu_a = vec![0.0f64; n];
    let mut q_mu_b = vec![0.0f64; n];
    for i in 0..n {
        if st.var_a[i] > VAR_FLOOR && st.var_b[i] > VAR_FLOOR {
            let root = (st.var_a[i] * st.var_b[i]).sqrt();
            p[i] = 1.0 / root;
            q[i] = st.cov[i] / (st.var_b[i] * root);
            p_mu_a[i] = p[i] * st.mu_a[i];
            q_mu_b[i] = q[i] * st.mu_b[i];
        }
    }
    let bp = box_sum(dims, &p, radius);
    let bq = box_sum(dims, &q, radius);
    let bpa = box_sum(dims, &p_mu_a, radius);
    let bqb = box_sum(dims, &q_mu_b, radius);
    let inv_n = 1.0 / n as f64;
    let mut g = vec![0.0f64; n];
    for i in 0..n {
        g[i] = inv_n
            * (a.data[i] as f64 * bp[i] - bpa[i] - b.data[i] as f64 * bq[i] + bqb[i]);
    }
    Ok(g)
}

/// Central-difference spatial gradient of a volume in physical coordinates,
/// one-sided at borders.
pub fn spatial_gradient(v: &Volume3D) -> VectorField3D {
    let (nx, ny, nz) = v.dims;
    let (sx, sy, sz) = v.spacing;
    let mut out = VectorField3D::zeros(v.dims, v.spacing, FieldKind::Displacement);
    let diff = |lo: f32, hi: f32, h: f32| (hi - lo) / h;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let gx = if nx == 1 {
                    0.0
                } else if i == 0 {
                    diff(v.at(0, j, k), v.at(1, j, k), sx)
                } else if i == nx - 1 {
                    diff(v.at(nx - 2, j, k), v.at(nx - 1, j, k), sx)
                } else {
                    diff(v.at(i - 1, j, k), v.at(i + 1, j, k), 2.0 * sx)
                };
                let gy = if ny == 1 {
                    0.0
                } else if j == 0 {
                    diff(v.at(i, 0, k), v.at(i, 1, k), sy)
                } else if j == ny - 1 {
                    diff(v.at(i, ny - 2, k), v.at(i, ny - 1, k), sy)
                } else {
                    diff(v.at(i, j - 1, k), v.at(i, j + 1, k), 2.0 * sy)
                };
                let gz = if nz == 1 {
                    0.0
                } else if k == 0 {
                    diff(v.at(i, j, 0), v.at(i, j, 1), sz)
                } else if k == nz - 1 {
                    diff(v.at(i, j, nz - 2), v.at(i, j, nz - 1), sz)
                } else {
                    diff(v.at(i, j, k - 1), v.at(i, j, k + 1), 2.0 * sz)
                };
                out.data[idx] = [gx, gy, gz];
            }
        }
    }
    out
}

/// Ascent direction on similarity with respect to a displacement of the
/// moving image `b`: intensity derivative chained with the spatial gradient
/// of `b`.
pub fn lncc_gradient(a: &Volume3D, b: &Volume3D, radius: usize) -> Result<VectorField3D> {
    let gi = lncc_intensity_gradient(a, b, radius)?;
    let gs = spatial_gradient(b);
    let mut out = VectorField3D::zeros(a.dims, a.spacing, FieldKind::Displacement);
    for (o, (gi, gs)) in out.data.iter_mut().zip(gi.iter().zip(&gs.data)) {
        *o = [
            (*gi * gs[0] as f64) as f32,
            (*gi * gs[1] as f64) as f32,
            (*gi * gs[2] as f64) as f32,
        ];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_vol(seed: u64, dims: (usize, usize, usize)) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(-1.0..1.0f32))
            .collect();
        Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn lncc_self_is_one() {
        let v = noise_vol(1, (10, 9, 8));
        let s = lncc(&v, &v, 3).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn lncc_negated_is_minus_one() {
        let v = noise_vol(2, (10, 9, 8));
        let neg = Volume3D::new(v.dims, v.spacing, v.data.iter().map(|&x| -x + 0.7).collect())
            .unwrap();
        let s = lncc(&v, &neg, 3).unwrap();
        assert!((s + 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn lncc_independent_noise_is_near_zero() {
        let a = noise_vol(3, (16, 16, 16));
        let b = noise_vol(4, (16, 16, 16));
        let s = lncc(&a, &b, 3).unwrap();
        assert!(s.abs() < 0.05, "{s}");
    }

    #[test]
    fn lncc_constant_degenerate_contributes_zero() {
        let a = Volume3D::constant((8, 8, 8), (1.0, 1.0, 1.0), 2.0);
        let b = noise_vol(5, (8, 8, 8));
        assert_eq!(lncc(&a, &b, 2).unwrap(), 0.0);
    }

    #[test]
    fn lncc_rejects_dim_mismatch() {
        let a = noise_vol(1, (4, 4, 4));
        let b = noise_vol(1, (5, 4, 4));
        assert!(lncc(&a, &b, 2).is_err());
    }

    #[test]
    fn gradient_is_zero_at_optimum() {
        let v = noise_vol(6, (12, 12, 12));
        let (lo, hi) = v.min_max();
        let g = lncc_intensity_gradient(&v, &v, 3).unwrap();
        let mean_abs = g.iter().map(|x| x.abs()).sum::<f64>() / g.len() as f64;
        assert!(mean_abs < 1e-4 * (hi - lo) as f64, "{mean_abs}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // directional derivative of lncc(a, b + t*delta) at t=0; intensities
        // are quantized to multiples of 2^-10 and eps is 2^-13 so every
        // perturbed value is exactly representable in f32, leaving only the
        // O(eps^2) truncation error of the central difference
        let dims = (9, 8, 7);
        let quantize = |mut v: Volume3D| {
            for x in &mut v.data {
                *x = (*x * 1024.0).round() / 1024.0;
            }
            v
        };
        let a = quantize(noise_vol(7, dims));
        let b = quantize(noise_vol(8, dims));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta: Vec<f64> = (0..b.data.len())
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let g = lncc_intensity_gradient(&a, &b, 2).unwrap();
        let analytic: f64 = g.iter().zip(&delta).map(|(x, d)| x * d).sum();

        let eps = (2.0f64).powi(-13);
        let perturbed = |t: f64| {
            let data: Vec<f32> = b
                .data
                .iter()
                .zip(&delta)
                .map(|(&x, d)| (x as f64 + t * d) as f32)
                .collect();
            Volume3D::new(dims, b.spacing, data).unwrap()
        };
        let fp = lncc(&a, &perturbed(eps), 2).unwrap();
        let fm = lncc(&a, &perturbed(-eps), 2).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-3, "analytic {analytic} vs fd {fd}, rel {rel}");
    }

    #[test]
    fn gradient_points_toward_fixed_blob() {
        // fixed blob at +2 voxels in x relative to moving: moving must move in
        // +x, i.e. pull-back displacement gradient mean x-component > 0
        let n = 16;
        let blob = |cx: f32| {
            let mut v = Volume3D::zeros((n, n, n), (1.0, 1.0, 1.0));
            for k in 0..n {
                for j in 0..n {
                    for i in 0..n {
                        let dx = i as f32 - cx;
                        let dy = j as f32 - 8.0;
                        let dz = k as f32 - 8.0;
                        v.set(i, j, k, (-(dx * dx + dy * dy + dz * dz) / 8.0).exp());
                    }
                }
            }
            v
        };
        let fixed = blob(10.0);
        let moving = blob(8.0);
        // pull-back: sampling moving at x + d with d_x > 0 shifts its content
        // toward -x ... we need the warped moving to match fixed at +2, so
        // moving(x + d(x)) = moving_content shifted by -d; content must shift
        // +2 => d_x ~ -2. The ascent direction should have negative mean x.
        let g = lncc_gradient(&fixed, &moving, 3).unwrap();
        let mean_x: f64 = g.data.iter().map(|v| v[0] as f64).sum::<f64>() / g.data.len() as f64;
        assert!(mean_x < 0.0, "mean_x = {mean_x}");
    }
}
