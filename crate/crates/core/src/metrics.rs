//! Image-quality metrics: SSIM, RMSE, PSNR, myocardium-to-blood-pool ratio,
//! a threshold defect-size surrogate and FWHM.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::gaussian_blur3d;
use crate::datamodel::{Dims3, VolumeGrid};
use crate::error::{Error, Result};
use crate::losses::{SSIM_K1, SSIM_K2, SSIM_RADIUS, SSIM_SIGMA};

/// SSIM window and stabiliser settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub sigma: f64,
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            sigma: SSIM_SIGMA,
            radius: SSIM_RADIUS,
            k1: SSIM_K1,
            k2: SSIM_K2,
        }
    }
}

fn same_dims(x: &VolumeGrid, y: &VolumeGrid) -> Result<Dims3> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{} vs {}", x.dims(), y.dims())));
    }
    Ok(x.dims())
}

fn as_f64(v: &VolumeGrid) -> Vec<f64> {
    v.values().iter().map(|&a| a as f64).collect()
}

/// Mean of the local SSIM map. The Gaussian window is renormalised where the
/// border truncates it.
pub fn ssim(x: &VolumeGrid, y: &VolumeGrid, params: SsimParams, peak: f64) -> Result<f64> {
    let d = same_dims(x, y)?;
    if !(peak > 0.0) {
        return Err(Error::Numerical(format!("ssim peak must be positive, got {peak}")));
    }
    let dims = [d.nz, d.ny, d.nx];
    let blur = |v: &[f64]| gaussian_blur3d(v, 1, dims, params.sigma, params.radius, false);
    let (a, b) = (as_f64(x), as_f64(y));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = blur(&a);
    let my = blur(&b);
    let exx = blur(&prod(&a, &a));
    let eyy = blur(&prod(&b, &b));
    let exy = blur(&prod(&a, &b));
    let c1 = (params.k1 * peak).powi(2);
    let c2 = (params.k2 * peak).powi(2);
    let n = a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Root-mean-square difference.
pub fn rmse(x: &VolumeGrid, y: &VolumeGrid) -> Result<f64> {
    same_dims(x, y)?;
    let n = x.values().len() as f64;
    let ss: f64 = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

/// `20·log10(peak) − 20·log10(rmse)`; identical volumes give `+∞`.
pub fn psnr(x: &VolumeGrid, y: &VolumeGrid, peak: f64) -> Result<f64> {
    let r = rmse(x, y)?;
    Ok(psnr_from_rmse(r, peak))
}

pub fn psnr_from_rmse(rmse: f64, peak: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * peak.log10() - 20.0 * rmse.log10()
    }
}

fn masked_mean(x: &VolumeGrid, mask: &[bool], what: &str) -> Result<f64> {
    if mask.len() != x.values().len() {
        return Err(Error::Shape(format!("{what} mask has {} voxels, volume {}", mask.len(), x.values().len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &m) in x.values().iter().zip(mask) {
        if m {
            s += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Dataset(format!("{what} mask is empty")));
    }
    Ok(s / n as f64)
}

/// Mean myocardial uptake over mean blood-pool uptake (denominator floored at
/// 1e-8).
pub fn mbp_ratio(x: &VolumeGrid, myocardium: &[bool], blood_pool: &[bool]) -> Result<f64> {
    let m = masked_mean(x, myocardium, "myocardium")?;
    let b = masked_mean(x, blood_pool, "blood pool")?;
    Ok(m / b.max(1e-8))
}

/// Fraction threshold of the defect-size surrogate.
pub const DEFECT_THRESHOLD: f64 = 0.5;

/// Percentage of myocardial voxels below half of the mean of the top decile
/// of myocardial values.
pub fn defect_size(x: &VolumeGrid, myocardium: &[bool]) -> Result<f64> {
    if myocardium.len() != x.values().len() {
        return Err(Error::Shape("myocardium mask does not match the volume".into()));
    }
    let mut vals: Vec<f64> = x
        .values()
        .iter()
        .zip(myocardium)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.is_empty() {
        return Err(Error::Dataset("myocardium mask is empty".into()));
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    let top = vals.len().div_ceil(10);
    let norm = vals[..top].iter().sum::<f64>() / top as f64;
    if norm <= 0.0 {
        return Ok(100.0);
    }
    let below = vals.iter().filter(|&&v| v / norm < DEFECT_THRESHOLD).count();
    Ok(100.0 * below as f64 / vals.len() as f64)
}

/// Full width at half maximum of a sampled profile, linearly interpolated,
/// with the baseline at the profile minimum.
pub fn fwhm(profile: &[f64], spacing: f64) -> Result<f64> {
    if profile.len() < 3 || profile.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("fwhm needs at least 3 finite samples".into()));
    }
    let (imax, &max) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let min = profile.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min <= 0.0 {
        return Err(Error::Numerical("fwhm of a flat profile".into()));
    }
    let half = min + 0.5 * (max - min);
    // walk outwards from the peak to the first half-level crossings
    let mut left = None;
    for i in (0..imax).rev() {
        if profile[i] <= half {
            let (a, b) = (profile[i], profile[i + 1]);
            left = Some(i as f64 + (half - a) / (b - a));
            break;
        }
    }
    let mut right = None;
    for i in imax + 1..profile.len() {
        if profile[i] <= half {
            let (a, b) = (profile[i - 1], profile[i]);
            right = Some((i - 1) as f64 + (a - half) / (a - b));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok((r - l) * spacing),
        _ => Err(Error::Numerical("profile does not fall to half maximum on both sides".into())),
    }
}

/// Metric values of one reconstruction against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ssim: f64,
    pub rmse: f64,
    /// `None` when the reconstruction equals the reference (infinite PSNR).
    pub psnr: Option<f64>,
    pub mbp: Option<f64>,
    pub defect_size: Option<f64>,
}

/// Compare `x` with `reference` using the reference maximum as the peak.
pub fn evaluate(
    x: &VolumeGrid,
    reference: &VolumeGrid,
    myocardium: Option<&[bool]>,
    blood_pool: Option<&[bool]>,
) -> Result<MetricValues> {
    let peak = reference.max().max(f32::MIN_POSITIVE) as f64;
    let r = rmse(x, reference)?;
    let p = psnr_from_rmse(r, peak);
    let mbp = match (myocardium, blood_pool) {
        (Some(m), Some(b)) => Some(mbp_ratio(x, m, b)?),
        _ => None,
    };
    Ok(MetricValues {
        ssim: ssim(x, reference, SsimParams::default(), peak)?,
        rmse: r,
        psnr: p.is_finite().then_some(p),
        mbp,
        defect_size: myocardium.map(|m| defect_size(x, m)).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub method: String,
    pub has_defect: bool,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub ssim: Option<Aggregate>,
    pub rmse: Option<Aggregate>,
    pub psnr: Option<Aggregate>,
    pub mbp: Option<Aggregate>,
    /// Over defect subjects only.
    pub defect_size: Option<Aggregate>,
}

/// Per-subject rows plus per-method mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: String,
    pub subjects: Vec<SubjectMetrics>,
    pub summary: Vec<MethodSummary>,
}

impl MetricReport {
    pub fn new(reference: impl Into<String>, subjects: Vec<SubjectMetrics>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for s in &subjects {
            if !methods.contains(&s.method) {
                methods.push(s.method.clone());
            }
        }
        let summary = methods
            .iter()
            .map(|m| {
                let rows: Vec<&SubjectMetrics> = subjects.iter().filter(|s| &s.method == m).collect();
                let col = |f: &dyn Fn(&SubjectMetrics) -> Option<f64>| {
                    Aggregate::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                MethodSummary {
                    method: m.clone(),
                    ssim: col(&|r| Some(r.values.ssim)),
                    rmse: col(&|r| Some(r.values.rmse)),
                    psnr: col(&|r| r.values.psnr),
                    mbp: col(&|r| r.values.mbp),
                    defect_size: col(&|r| if r.has_defect { r.values.defect_size } else { None }),
                }
            })
            .collect();
        MetricReport {
            reference: reference.into(),
            subjects,
            summary,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == name)
    }

    /// One line per method: `method,ssim_mean,ssim_std,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,ssim_mean,ssim_std,rmse_mean,rmse_std,psnr_mean,psnr_std,mbp_mean,mbp_std,defect_size_mean,defect_size_std\n",
        );
        let cell = |a: &Option<Aggregate>| match a {
            Some(a) => format!("{},{}", a.mean, a.std),
            None => ",".to_string(),
        };
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.method,
                cell(&s.ssim),
                cell(&s.rmse),
                cell(&s.psnr),
                cell(&s.mbp),
                cell(&s.defect_size)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(d: Dims3, f: impl Fn(usize) -> f32) -> VolumeGrid {
        VolumeGrid::new(d, [1.0; 3], (0..d.len()).map(f).collect()).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let d = Dims3::new(6, 5, 4);
        let x = vol(d, |i| (i % 7) as f32);
        assert!((ssim(&x, &x, SsimParams::default(), 6.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 6.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_error_of_a_tenth() {
        let d = Dims3::new(4, 4, 4);
        let x = vol(d, |_| 0.5);
        let y = vol(d, |_| 0.6);
        let r = rmse(&x, &y).unwrap();
        assert!((r - 0.1).abs() < 1e-6);
        assert!((psnr_from_rmse(0.1, 1.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn mbp_of_uniform_volume_is_one() {
        let d = Dims3::new(4, 4, 2);
        let x = vol(d, |_| 3.0);
        let m: Vec<bool> = (0..d.len()).map(|i| i % 2 == 0).collect();
        let b: Vec<bool> = m.iter().map(|v| !v).collect();
        assert_eq!(mbp_ratio(&x, &m, &b).unwrap(), 1.0);
        assert!(mbp_ratio(&x, &m, &vec![false; d.len()]).is_err());
    }

    #[test]
    fn defect_size_cases() {
        let d = Dims3::new(10, 2, 1);
        let m = vec![true; d.len()];
        assert_eq!(defect_size(&vol(d, |_| 2.0), &m).unwrap(), 0.0);
        let half = vol(d, |i| if i < 10 { 0.0 } else { 2.0 });
        assert_eq!(defect_size(&half, &m).unwrap(), 50.0);
    }

    #[test]
    fn fwhm_of_triangle() {
        let p: Vec<f64> = (0..9).map(|i| 1.0 - (i as f64 - 4.0).abs() / 4.0).collect();
        assert!((fwhm(&p, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(fwhm(&[1.0; 5], 1.0).is_err());
    }
}
