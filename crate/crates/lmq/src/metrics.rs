//! Image quality metrics: PSNR, single-scale SSIM on luma, and MAE on a
//! 0–255 scale.

use crate::laplace::LUMA;
use crate::tape::Arr;
use crate::{LmqError, Result};
use ndarray::Array2;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_image_pair(pred: &Arr, gt: &Arr) -> Result<()> {
    if pred.ndim() != 3 {
        return Err(LmqError::invalid(format!(
            "metrics expect (c, h, w) images, got {}-d",
            pred.ndim()
        )));
    }
    if pred.shape() != gt.shape() {
        return Err(LmqError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at 100.
pub fn psnr(pred: &Arr, gt: &Arr, max_val: f64) -> Result<f64> {
    check_image_pair(pred, gt)?;
    if max_val <= 0.0 {
        return Err(LmqError::invalid("max_val must be positive"));
    }
    let mse: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute error, scaled (default 255 for byte-range reporting).
pub fn mae(pred: &Arr, gt: &Arr, scale: f64) -> Result<f64> {
    check_image_pair(pred, gt)?;
    let m: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(m * scale)
}

/// Luma plane of a `(c, h, w)` image: BT.601 weights for 3 channels, the
/// plane itself for 1 channel.
fn luma_plane(img: &Arr) -> Result<Array2<f64>> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Array2::zeros((h, w));
    match c {
        1 => {
            for hi in 0..h {
                for wi in 0..w {
                    out[[hi, wi]] = img[[0, hi, wi]];
                }
            }
        }
        3 => {
            for hi in 0..h {
                for wi in 0..w {
                    out[[hi, wi]] = LUMA[0] * img[[0, hi, wi]]
                        + LUMA[1] * img[[1, hi, wi]]
                        + LUMA[2] * img[[2, hi, wi]];
                }
            }
        }
        _ => {
            return Err(LmqError::invalid(format!(
                "luma expects 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(out)
}

fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW;
    let half = (n / 2) as f64;
    let mut w = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[i, j]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

/// Single-scale SSIM over luma with an 11×11 Gaussian window (σ = 1.5),
/// averaged over fully valid window positions.
pub fn ssim(pred: &Arr, gt: &Arr) -> Result<f64> {
    check_image_pair(pred, gt)?;
    let x = luma_plane(pred)?;
    let y = luma_plane(gt)?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LmqError::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - SSIM_WINDOW) {
        for left in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wv = win[[i, j]];
                    let xv = x[[top + i, left + j]];
                    let yv = y[[top + i, left + j]];
                    mx += wv * xv;
                    my += wv * yv;
                    mxx += wv * xv * xv;
                    myy += wv * yv * yv;
                    mxy += wv * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Averages of the three metrics over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "psnr_db,ssim,mae,n_images";

    /// Per-image metrics for one prediction/ground-truth pair.
    pub fn for_pair(pred: &Arr, gt: &Arr) -> Result<MetricReport> {
        Ok(MetricReport {
            psnr_db: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
            mae: mae(pred, gt, 255.0)?,
            n_images: 1,
        })
    }

    /// Image-count-weighted average of several reports.
    pub fn average(reports: &[MetricReport]) -> Result<MetricReport> {
        let total: usize = reports.iter().map(|r| r.n_images).sum();
        if total == 0 {
            return Err(LmqError::invalid("cannot average zero images"));
        }
        let weight = |f: fn(&MetricReport) -> f64| {
            reports
                .iter()
                .map(|r| f(r) * r.n_images as f64)
                .sum::<f64>()
                / total as f64
        };
        Ok(MetricReport {
            psnr_db: weight(|r| r.psnr_db),
            ssim: weight(|r| r.ssim),
            mae: weight(|r| r.mae),
            n_images: total,
        })
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{}",
            self.psnr_db, self.ssim, self.mae, self.n_images
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "psnr_db={:.6}\nssim={:.6}\nmae={:.6}\nn_images={}\n",
            self.psnr_db, self.ssim, self.mae, self.n_images
        )
    }
}
