//! Laplace prior: grayscale reduction, a fixed 4-neighbor Laplacian, the
//! coarse-mask training target, and histogram-entropy utilities.
//!
//! The Laplacian concentrates the snow signal into sparse edge responses,
//! which is what makes a small quantized autoencoder able to model it.

use crate::error::{LmqError, Result};
use crate::img::{ImageTensor, LaplaceMap};
use ndarray::Array3;

/// BT.601 luma weights used for every RGB → gray reduction in the crate.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Mirrors an out-of-range index back into `0..len` (reflection about the
/// edge pixel, so index -1 maps to 1). Only valid for `|i| < 2*len`.
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&j), "reflect({i}, {len}) out of range");
    j as usize
}

/// Luma-weighted grayscale. Single-channel input passes through unchanged.
pub fn to_grayscale(img: &ImageTensor) -> Result<LaplaceMap> {
    let (c, h, w) = img.data().dim();
    match c {
        1 => LaplaceMap::new(img.data().clone()),
        3 => {
            let mut out = Array3::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = LUMA[0] * img.data()[[0, y, x]]
                        + LUMA[1] * img.data()[[1, y, x]]
                        + LUMA[2] * img.data()[[2, y, x]];
                }
            }
            LaplaceMap::new(out)
        }
        other => Err(LmqError::invalid(format!(
            "grayscale expects 1 or 3 channels, got {other}"
        ))),
    }
}

/// Discrete 4-neighbor Laplacian with reflect padding:
///
/// ```text
///  0  1  0
///  1 -4  1
///  0  1  0
/// ```
pub fn laplace_filter(map: &LaplaceMap) -> Result<LaplaceMap> {
    let (_, h, w) = map.data().dim();
    let src = map.data();
    let mut out = Array3::zeros((1, h, w));
    for y in 0..h {
        let yn = reflect(y as isize - 1, h);
        let ys = reflect(y as isize + 1, h);
        for x in 0..w {
            let xw = reflect(x as isize - 1, w);
            let xe = reflect(x as isize + 1, w);
            out[[0, y, x]] = src[[0, yn, x]] + src[[0, ys, x]] + src[[0, y, xw]]
                + src[[0, y, xe]]
                - 4.0 * src[[0, y, x]];
        }
    }
    LaplaceMap::new(out)
}

/// Supervision target for the coarse-mask generator: the difference of the
/// Laplacians of the degraded and clean grays. Zero wherever the two images
/// agree locally.
pub fn coarse_mask_target(snow: &ImageTensor, clean: &ImageTensor) -> Result<LaplaceMap> {
    if snow.data().dim() != clean.data().dim() {
        return Err(LmqError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            snow.data().dim(),
            clean.data().dim()
        )));
    }
    let ls = laplace_filter(&to_grayscale(snow)?)?;
    let lc = laplace_filter(&to_grayscale(clean)?)?;
    LaplaceMap::new(ls.into_data() - lc.data())
}

/// Shannon entropy (nats) of a histogram of the map's values.
///
/// `range` fixes the histogram support; pass the same range for two maps to
/// make their entropies comparable. Without it the map's own min/max is used.
/// A constant map (or zero-width range) carries no information: entropy 0.
pub fn shannon_entropy(map: &LaplaceMap, n_bins: usize, range: Option<(f64, f64)>) -> Result<f64> {
    if n_bins < 2 {
        return Err(LmqError::invalid(format!(
            "entropy needs at least 2 bins, got {n_bins}"
        )));
    }
    let data = map.data();
    let n = data.len();
    if n == 0 {
        return Err(LmqError::invalid("entropy of an empty map"));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(LmqError::invalid(format!(
                    "bad entropy range [{lo}, {hi}]"
                )));
            }
            (lo, hi)
        }
        None => {
            let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let span = hi - lo;
    if span == 0.0 {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; n_bins];
    for &v in data.iter() {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        let bin = ((t * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let total = n as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// KL divergence of a one-hot distribution from the uniform distribution over
/// `k` symbols: `ln k`. This is the information budget of emitting a single
/// codebook index, and the yardstick for how cheap the quantized mask code is.
pub fn kl_onehot_uniform(k: usize) -> Result<f64> {
    if k < 1 {
        return Err(LmqError::invalid("distribution needs at least one symbol"));
    }
    Ok((k as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn solid_rgb(r: f64, g: f64, b: f64) -> ImageTensor {
        let mut data = Array3::zeros((3, 8, 8));
        data.index_axis_mut(ndarray::Axis(0), 0).fill(r);
        data.index_axis_mut(ndarray::Axis(0), 1).fill(g);
        data.index_axis_mut(ndarray::Axis(0), 2).fill(b);
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn pure_red_grays_to_luma_weight() {
        let red = solid_rgb(1.0, 0.0, 0.0);
        let gray = to_grayscale(&red).unwrap();
        for &v in gray.data().iter() {
            assert_abs_diff_eq!(v, 0.299, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_channel_passes_through() {
        let data = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as f64 / 64.0);
        let img = ImageTensor::new(data.clone()).unwrap();
        let gray = to_grayscale(&img).unwrap();
        assert_eq!(gray.data(), &data);
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let map = LaplaceMap::new(Array3::from_elem((1, 8, 8), 0.7)).unwrap();
        let out = laplace_filter(&map).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_stamps_kernel_on_peak() {
        let mut data = Array3::zeros((1, 9, 9));
        data[[0, 4, 4]] = 1.0;
        let out = laplace_filter(&LaplaceMap::new(data).unwrap()).unwrap();
        assert_eq!(out.data()[[0, 4, 4]], -4.0);
        for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            assert_eq!(out.data()[[0, (4 + dy) as usize, (4 + dx) as usize]], 1.0);
        }
        assert_eq!(out.data()[[0, 3, 3]], 0.0);
        assert_eq!(out.data()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn laplacian_is_linear() {
        let a = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 31 + x * 7) % 13) as f64);
        let b = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 5 + x * 17) % 11) as f64);
        let (alpha, beta) = (0.6, -1.3);
        let combo = laplace_filter(
            &LaplaceMap::new(alpha * &a + beta * &b).unwrap(),
        )
        .unwrap();
        let la = laplace_filter(&LaplaceMap::new(a).unwrap()).unwrap();
        let lb = laplace_filter(&LaplaceMap::new(b).unwrap()).unwrap();
        let recomposed = alpha * la.data() + beta * lb.data();
        for (u, v) in combo.data().iter().zip(recomposed.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_pair_has_zero_mask_target() {
        let img = solid_rgb(0.3, 0.5, 0.2);
        let target = coarse_mask_target(&img, &img).unwrap();
        assert!(target.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_target_rejects_shape_mismatch() {
        let a = solid_rgb(0.1, 0.1, 0.1);
        let b = ImageTensor::new(Array3::zeros((3, 16, 16))).unwrap();
        assert!(coarse_mask_target(&a, &b).is_err());
    }

    #[test]
    fn entropy_of_constant_map_is_zero() {
        let map = LaplaceMap::new(Array3::from_elem((1, 8, 8), 3.0)).unwrap();
        assert_eq!(shannon_entropy(&map, 256, None).unwrap(), 0.0);
    }

    #[test]
    fn entropy_of_balanced_two_level_map_is_ln2() {
        let data = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y + x) % 2) as f64);
        let map = LaplaceMap::new(data).unwrap();
        let h = shannon_entropy(&map, 2, None).unwrap();
        assert_abs_diff_eq!(h, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_of_uniform_fill_hits_ln_bins() {
        // 64 values spread equally over 8 bins.
        let data = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 8 + x) % 8) as f64);
        let map = LaplaceMap::new(data).unwrap();
        let h = shannon_entropy(&map, 8, None).unwrap();
        assert_abs_diff_eq!(h, 8f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_rejects_degenerate_bins() {
        let map = LaplaceMap::new(Array3::zeros((1, 8, 8))).unwrap();
        assert!(shannon_entropy(&map, 1, None).is_err());
    }

    #[test]
    fn one_hot_kl_closed_forms() {
        assert_abs_diff_eq!(kl_onehot_uniform(512).unwrap(), 512f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(kl_onehot_uniform(512).unwrap(), 6.238324625039508, epsilon = 1e-9);
        assert_eq!(kl_onehot_uniform(1).unwrap(), 0.0);
        assert!(kl_onehot_uniform(0).is_err());
    }

    #[test]
    fn reflect_mirrors_about_edge() {
        assert_eq!(reflect(-1, 8), 1);
        assert_eq!(reflect(0, 8), 0);
        assert_eq!(reflect(8, 8), 6);
        assert_eq!(reflect(9, 8), 5);
    }
}
