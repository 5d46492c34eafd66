//! Slicewise non-local means pre-filtering.
//!
//! Used only to drive registration: the filtered volumes are discarded once
//! deformations are estimated and the warps are applied to the raw data.

use crate::error::Result;
use crate::volume::{Slice2D, Volume3D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PrefilterParams {
    /// Half-width of comparison patches (1 -> 3x3 patches).
    pub patch_radius: usize,
    /// Half-width of the search window (5 -> 11x11 window).
    pub search_radius: usize,
    /// Filtering strength on the normalized intensity scale.
    pub h: f32,
    /// Rescale each slice to [0,1] before filtering and back after.
    pub normalize: bool,
}

impl Default for PrefilterParams {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            search_radius: 5,
            h: 0.07,
            normalize: true,
        }
    }
}

impl PrefilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.search_radius < self.patch_radius {
            return Err(crate::CoreError::InvalidParam(format!(
                "search_radius {} < patch_radius {}",
                self.search_radius, self.patch_radius
            )));
        }
        if !(self.h > 0.0) {
            return Err(crate::CoreError::InvalidParam(format!("h must be > 0, got {}", self.h)));
        }
        Ok(())
    }
}

#[inline]
fn clamp_i(v: isize, hi: isize) -> usize {
    v.clamp(0, hi) as usize
}

/// Mean squared patch difference between patches centered at (x0,y0) and
/// (x1,y1), clamp-to-edge.
fn patch_dist2(s: &Slice2D, x0: isize, y0: isize, x1: isize, y1: isize, pr: isize) -> f64 {
    let (nx, ny) = (s.dims.0 as isize, s.dims.1 as isize);
    let mut acc = 0.0f64;
    let count = ((2 * pr + 1) * (2 * pr + 1)) as f64;
    for dy in -pr..=pr {
        for dx in -pr..=pr {
            let a = s.data[clamp_i(x0 + dx, nx - 1) + s.dims.0 * clamp_i(y0 + dy, ny - 1)];
            let b = s.data[clamp_i(x1 + dx, nx - 1) + s.dims.0 * clamp_i(y1 + dy, ny - 1)];
            let d = (a - b) as f64;
            acc += d * d;
        }
    }
    acc / count
}

/// Non-local means on one slice: weighted patch average over the search
/// window, weight `exp(-max(0, D^2 - 2h^2)/h^2)`.
pub fn nlm_denoise_slice(s: &Slice2D, p: &PrefilterParams) -> Slice2D {
    let (nx, ny) = s.dims;
    let (lo, hi) = s.min_max();
    let range = hi - lo;
    let normalized;
    let work = if p.normalize && range > 0.0 {
        normalized = Slice2D {
            dims: s.dims,
            data: s.data.iter().map(|&v| (v - lo) / range).collect(),
            provenance: s.provenance,
        };
        &normalized
    } else {
        s
    };

    let pr = p.patch_radius as isize;
    let sr = p.search_radius as isize;
    let h2 = (p.h as f64) * (p.h as f64);

    let mut out = vec![0.0f32; nx * ny];
    out.par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
        let y = y as isize;
        for (xi, o) in row.iter_mut().enumerate() {
            let x = xi as isize;
            let mut wsum = 0.0f64;
            let mut acc = 0.0f64;
            for sy in -sr..=sr {
                for sx in -sr..=sr {
                    let cx = clamp_i(x + sx, nx as isize - 1);
                    let cy = clamp_i(y + sy, ny as isize - 1);
                    let d2 = patch_dist2(work, x, y, cx as isize, cy as isize, pr);
                    let w = (-(d2 - 2.0 * h2).max(0.0) / h2).exp();
                    wsum += w;
                    acc += w * work.data[cx + nx * cy] as f64;
                }
            }
            *o = (acc / wsum) as f32;
        }
    });

    let data = if p.normalize && range > 0.0 {
        out.iter().map(|&v| lo + v * range).collect()
    } else {
        out
    };
    Slice2D {
        dims: s.dims,
        data,
        provenance: s.provenance,
    }
}

/// Apply `nlm_denoise_slice` independently to every XY slice.
pub fn prefilter_volume(v: &Volume3D, p: &PrefilterParams) -> Result<Volume3D> {
    p.validate()?;
    let (_, _, nz) = v.dims;
    let slices: Vec<Slice2D> = (0..nz)
        .into_par_iter()
        .map(|z| nlm_denoise_slice(&v.slice_xy(z), p))
        .collect();
    let mut out = Volume3D::zeros(v.dims, v.spacing);
    for (z, s) in slices.iter().enumerate() {
        out.set_slice_xy(z, s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_slice_unchanged() {
        let s = Slice2D::constant((9, 9), 4.2);
        let out = nlm_denoise_slice(&s, &PrefilterParams::default());
        for &v in &out.data {
            assert!((v - 4.2).abs() < 1e-6);
        }
    }

    #[test]
    fn search_radius_zero_is_identity() {
        let s = Slice2D::new((3, 3), (0..9).map(|i| i as f32).collect()).unwrap();
        let p = PrefilterParams {
            search_radius: 0,
            patch_radius: 0,
            ..Default::default()
        };
        let out = nlm_denoise_slice(&s, &p);
        for (a, b) in out.data.iter().zip(&s.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_h_patch_radius_zero_gives_window_mean() {
        // with patch_radius 0 and h -> inf every weight is 1, so the output
        // is the plain window mean. 5x5 slice, full window, one outlier.
        let mut data = vec![0.2f32; 25];
        data[12] = 0.9;
        let s = Slice2D::new((5, 5), data.clone()).unwrap();
        let p = PrefilterParams {
            patch_radius: 0,
            search_radius: 2,
            h: 1e6,
            normalize: false,
        };
        let out = nlm_denoise_slice(&s, &p);
        let mean: f32 = data.iter().sum::<f32>() / 25.0;
        assert!((out.at(2, 2) - mean).abs() < 1e-6, "{} vs {}", out.at(2, 2), mean);
    }

    #[test]
    fn output_stays_in_input_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..16 * 16).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let s = Slice2D::new((16, 16), data).unwrap();
        let (lo, hi) = s.min_max();
        let out = nlm_denoise_slice(&s, &PrefilterParams::default());
        for &v in &out.data {
            assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn variance_decreases_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 24;
        let data: Vec<f32> = (0..n * n).map(|_| 0.5 + 0.1 * rng.gen_range(-1.0..1.0f32)).collect();
        let s = Slice2D::new((n, n), data).unwrap();
        let var = |d: &[f32]| {
            let m = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
            d.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / d.len() as f64
        };
        let out = nlm_denoise_slice(&s, &PrefilterParams::default());
        assert!(var(&out.data) < var(&s.data));
    }

    #[test]
    fn slicewise_independence() {
        // slice 0 constant, slice 1 noisy: slice 0 unchanged, no leakage
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let mut v = Volume3D::zeros((n, n, 2), (1.0, 1.0, 1.0));
        for j in 0..n {
            for i in 0..n {
                v.set(i, j, 0, 0.5);
                v.set(i, j, 1, rng.gen_range(0.0..1.0));
            }
        }
        let out = prefilter_volume(&v, &PrefilterParams::default()).unwrap();
        for j in 0..n {
            for i in 0..n {
                assert!((out.at(i, j, 0) - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuting_slices_commutes_with_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let nz = 3;
        let data: Vec<f32> = (0..n * n * nz).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = Volume3D::new((n, n, nz), (1.0, 1.0, 1.0), data).unwrap();
        let perm = [2usize, 0, 1];
        let mut vp = Volume3D::zeros(v.dims, v.spacing);
        for (dst, &src) in perm.iter().enumerate() {
            vp.set_slice_xy(dst, &v.slice_xy(src));
        }
        let p = PrefilterParams::default();
        let f = prefilter_volume(&v, &p).unwrap();
        let fp = prefilter_volume(&vp, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(fp.slice_xy(dst).data, f.slice_xy(src).data);
        }
    }

    #[test]
    fn shift_equivariance_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 20;
        let data: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = Slice2D::new((n, n), data).unwrap();
        // translate by 2 pixels in x (wrapping content ignored: compare interior)
        let mut shifted = Slice2D::constant((n, n), 0.0);
        for j in 0..n {
            for i in 0..n {
                let si = (i + 2) % n;
                shifted.data[i + n * j] = s.data[si + n * j];
            }
        }
        let p = PrefilterParams { normalize: false, ..Default::default() };
        let f = nlm_denoise_slice(&s, &p);
        let fs = nlm_denoise_slice(&shifted, &p);
        let m = p.search_radius + p.patch_radius + 2;
        for j in m..n - m {
            for i in m..n - m - 2 {
                let a = fs.at(i, j);
                let b = f.at(i + 2, j);
                assert!((a - b).abs() < 1e-5, "({i},{j}): {a} vs {b}");
            }
        }
    }
}
