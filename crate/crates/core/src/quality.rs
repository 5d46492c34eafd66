//! No-reference quality metrics (Q and AD) plus full-reference PSNR/SSIM for
//! phantom validation, and dataset-wide method benchmarking.

use crate::error::{CoreError, Result};
use crate::volume::{Slice2D, Volume3D};
use serde::{Deserialize, Serialize};

const DEGENERATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QualityParams {
    /// Q-metric patch size (non-overlapping).
    pub q_patch: usize,
    /// Q-metric coherence selection threshold.
    pub q_coherence_threshold: f64,
    /// AD windowed-correlation window size (non-overlapping).
    pub ad_window: usize,
}

impl Default for QualityParams {
    fn default() -> Self {
        Self {
            q_patch: 8,
            q_coherence_threshold: 0.5,
            ad_window: 8,
        }
    }
}

/// Central-difference gradient of a slice (unit spacing, one-sided borders).
fn slice_gradients(s: &Slice2D) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = s.dims;
    let mut gx = vec![0.0f64; nx * ny];
    let mut gy = vec![0.0f64; nx * ny];
    let at = |i: usize, j: usize| s.data[i + nx * j] as f64;
    for j in 0..ny {
        for i in 0..nx {
            gx[i + nx * j] = if nx == 1 {
                0.0
            } else if i == 0 {
                at(1, j) - at(0, j)
            } else if i == nx - 1 {
                at(nx - 1, j) - at(nx - 2, j)
            } else {
                (at(i + 1, j) - at(i - 1, j)) / 2.0
            };
            gy[i + nx * j] = if ny == 1 {
                0.0
            } else if j == 0 {
                at(i, 1) - at(i, 0)
            } else if j == ny - 1 {
                at(i, ny - 1) - at(i, ny - 2)
            } else {
                (at(i, j + 1) - at(i, j - 1)) / 2.0
            };
        }
    }
    (gx, gy)
}

/// Singular values of the Nx2 gradient matrix via the 2x2 Gram matrix.
pub(crate) fn gradient_singular_values(gx: &[f64], gy: &[f64]) -> (f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (x, y) in gx.iter().zip(gy) {
        a += x * x;
        b += x * y;
        c += y * y;
    }
    let tr = a + c;
    let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
    let l1 = 0.5 * (tr + disc);
    let l2 = (0.5 * (tr - disc)).max(0.0);
    (l1.sqrt(), l2.sqrt())
}

/// Anisotropic-patch SVD sharpness score: tile into non-overlapping
/// patch x patch blocks, score each coherent block by s1 * (s1-s2)/(s1+s2),
/// average over blocks whose coherence exceeds the threshold.
pub fn q_metric(img: &Slice2D, patch: usize, coherence_threshold: f64) -> Result<f64> {
    let (nx, ny) = img.dims;
    if patch == 0 || nx < patch || ny < patch {
        return Err(CoreError::InvalidParam(format!(
            "image {nx}x{ny} smaller than one {patch}x{patch} patch"
        )));
    }
    let (gx, gy) = slice_gradients(img);
    let bx = nx / patch;
    let by = ny / patch;
    let mut sum = 0.0f64;
    let mut selected = 0usize;
    let mut pgx = vec![0.0f64; patch * patch];
    let mut pgy = vec![0.0f64; patch * patch];
    for pj in 0..by {
        for pi in 0..bx {
            let mut t = 0;
            for j in 0..patch {
                for i in 0..patch {
                    let idx = (pi * patch + i) + nx * (pj * patch + j);
                    pgx[t] = gx[idx];
                    pgy[t] = gy[idx];
                    t += 1;
                }
            }
            let (s1, s2) = gradient_singular_values(&pgx, &pgy);
            if s1 + s2 < DEGENERATE_FLOOR {
                continue;
            }
            let coherence = (s1 - s2) / (s1 + s2);
            if coherence > coherence_threshold {
                sum += s1 * coherence;
                selected += 1;
            }
        }
    }
    Ok(if selected == 0 { 0.0 } else { sum / selected as f64 })
}

fn window_pearson(a: &[f64], b: &[f64]) -> f64 {
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
    if va < DEGENERATE_FLOOR || vb < DEGENERATE_FLOOR {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Negated windowed correlation between method noise (noisy - denoised) and
/// the denoised image; higher is better.
pub fn ad_metric(noisy: &Slice2D, denoised: &Slice2D, window: usize) -> Result<f64> {
    if noisy.dims != denoised.dims {
        return Err(CoreError::DimMismatch {
            context: "ad_metric",
            expected: (noisy.dims.0, noisy.dims.1, 1),
            got: (denoised.dims.0, denoised.dims.1, 1),
        });
    }
    let (nx, ny) = noisy.dims;
    if window == 0 || nx < window || ny < window {
        return Err(CoreError::InvalidParam(format!(
            "image {nx}x{ny} smaller than one {window}x{window} window"
        )));
    }
    let bx = nx / window;
    let by = ny / window;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut r = vec![0.0f64; window * window];
    let mut d = vec![0.0f64; window * window];
    for pj in 0..by {
        for pi in 0..bx {
            let mut t = 0;
            for j in 0..window {
                for i in 0..window {
                    let idx = (pi * window + i) + nx * (pj * window + j);
                    let den = denoised.data[idx] as f64;
                    r[t] = noisy.data[idx] as f64 - den;
                    d[t] = den;
                    t += 1;
                }
            }
            sum += window_pearson(&r, &d);
            count += 1;
        }
    }
    Ok(-(sum / count as f64))
}

/// 10*log10(peak^2 / MSE); +inf for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::InvalidParam(format!(
            "psnr length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over non-overlapping 8x8 windows with the standard constants
/// C1=(0.01*peak)^2, C2=(0.03*peak)^2.
pub fn ssim(a: &Slice2D, b: &Slice2D, peak: f64) -> Result<f64> {
    if a.dims != b.dims {
        return Err(CoreError::DimMismatch {
            context: "ssim",
            expected: (a.dims.0, a.dims.1, 1),
            got: (b.dims.0, b.dims.1, 1),
        });
    }
    let window = 8;
    let (nx, ny) = a.dims;
    if nx < window || ny < window {
        return Err(CoreError::InvalidParam(format!(
            "image {nx}x{ny} smaller than one {window}x{window} window"
        )));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let bx = nx / window;
    let by = ny / window;
    let m = (window * window) as f64;
    let mut sum = 0.0f64;
    for pj in 0..by {
        for pi in 0..bx {
            let mut sa = 0.0f64;
            let mut sb = 0.0f64;
            let mut saa = 0.0f64;
            let mut sbb = 0.0f64;
            let mut sab = 0.0f64;
            for j in 0..window {
                for i in 0..window {
                    let idx = (pi * window + i) + nx * (pj * window + j);
                    let x = a.data[idx] as f64;
                    let y = b.data[idx] as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let mu_a = sa / m;
            let mu_b = sb / m;
            let var_a = saa / m - mu_a * mu_a;
            let var_b = sbb / m - mu_b * mu_b;
            let cov = sab / m - mu_a * mu_b;
            sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(sum / (bx * by) as f64)
}

/// Slicewise mean of a per-slice metric over a volume's XY slices.
fn slicewise_mean<F: Fn(&Slice2D) -> Result<f64>>(v: &Volume3D, f: F) -> Result<f64> {
    let nz = v.dims.2;
    let mut sum = 0.0;
    for z in 0..nz {
        sum += f(&v.slice_xy(z))?;
    }
    Ok(sum / nz as f64)
}

pub fn q_metric_volume(v: &Volume3D, params: &QualityParams) -> Result<f64> {
    slicewise_mean(v, |s| q_metric(s, params.q_patch, params.q_coherence_threshold))
}

pub fn ad_metric_volume(noisy: &Volume3D, denoised: &Volume3D, params: &QualityParams) -> Result<f64> {
    if noisy.dims != denoised.dims {
        return Err(CoreError::DimMismatch {
            context: "ad_metric_volume",
            expected: noisy.dims,
            got: denoised.dims,
        });
    }
    let nz = noisy.dims.2;
    let mut sum = 0.0;
    for z in 0..nz {
        sum += ad_metric(&noisy.slice_xy(z), &denoised.slice_xy(z), params.ad_window)?;
    }
    Ok(sum / nz as f64)
}

pub fn ssim_volume(a: &Volume3D, b: &Volume3D, peak: f64) -> Result<f64> {
    if a.dims != b.dims {
        return Err(CoreError::DimMismatch {
            context: "ssim_volume",
            expected: a.dims,
            got: b.dims,
        });
    }
    let nz = a.dims.2;
    let mut sum = 0.0;
    for z in 0..nz {
        sum += ssim(&a.slice_xy(z), &b.slice_xy(z), peak)?;
    }
    Ok(sum / nz as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub method: String,
    pub image_id: usize,
    pub q: f64,
    pub ad: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_q: f64,
    pub mean_ad: f64,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: Vec<ImageScore>,
    pub summaries: Vec<MethodSummary>,
}

impl QualityReport {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => format!("{x:.6}"),
            None => String::new(),
        };
        let mut out = String::from("method,image_id,Q,AD,PSNR,SSIM\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.method,
                r.image_id,
                r.q,
                r.ad,
                fmt(r.psnr),
                fmt(r.ssim)
            ));
        }
        out.push_str("method,mean_Q,mean_AD,mean_PSNR,mean_SSIM\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                s.method,
                s.mean_q,
                s.mean_ad,
                fmt(s.mean_psnr),
                fmt(s.mean_ssim)
            ));
        }
        out
    }
}

/// Score every method's outputs against the matching noisy inputs (and clean
/// references, when present): per-image slicewise-mean Q and AD, plus
/// PSNR/SSIM when a reference exists, and per-method dataset means.
pub fn evaluate_methods(
    outputs: &[(String, Vec<Volume3D>)],
    noisy: &[Volume3D],
    clean: Option<&[Volume3D]>,
    params: &QualityParams,
) -> Result<QualityReport> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (method, vols) in outputs {
        if vols.len() != noisy.len() {
            return Err(CoreError::InvalidParam(format!(
                "method {method}: {} outputs for {} noisy inputs",
                vols.len(),
                noisy.len()
            )));
        }
        let mut mq = 0.0;
        let mut mad = 0.0;
        let mut mpsnr = 0.0;
        let mut mssim = 0.0;
        for (i, (out, inp)) in vols.iter().zip(noisy).enumerate() {
            let q = q_metric_volume(out, params)?;
            let ad = ad_metric_volume(inp, out, params)?;
            let (p, s) = match clean {
                Some(refs) => {
                    let (lo, hi) = refs[i].min_max();
                    let peak = (hi - lo).max(f32::MIN_POSITIVE) as f64;
                    (
                        Some(psnr(&out.data, &refs[i].data, peak)?),
                        Some(ssim_volume(out, &refs[i], peak)?),
                    )
                }
                None => (None, None),
            };
            mq += q;
            mad += ad;
            mpsnr += p.unwrap_or(0.0);
            mssim += s.unwrap_or(0.0);
            rows.push(ImageScore {
                method: method.clone(),
                image_id: i,
                q,
                ad,
                psnr: p,
                ssim: s,
            });
        }
        let n = vols.len() as f64;
        summaries.push(MethodSummary {
            method: method.clone(),
            mean_q: mq / n,
            mean_ad: mad / n,
            mean_psnr: clean.map(|_| mpsnr / n),
            mean_ssim: clean.map(|_| mssim / n),
        });
    }
    Ok(QualityReport { rows, summaries })
}
