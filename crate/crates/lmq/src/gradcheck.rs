//! Numerical gradient verification by central finite differences.
//!
//! `check` perturbs every element of every input array by ±h, evaluates the
//! scalar function, and compares the resulting numerical gradients against
//! analytic ones using a relative L2 error per tensor.

use crate::tape::Arr;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Central-difference gradients of `f` w.r.t. each input array.
pub fn finite_diff(mut f: impl FnMut(&[Arr]) -> f64, inputs: &[Arr], h: f64) -> Vec<Arr> {
    let mut work: Vec<Arr> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Arr::zeros(inputs[ti].raw_dim());
        let n = inputs[ti].len();
        for e in 0..n {
            let orig = work[ti].as_slice().unwrap()[e];
            work[ti].as_slice_mut().unwrap()[e] = orig + h;
            let fp = f(&work);
            work[ti].as_slice_mut().unwrap()[e] = orig - h;
            let fm = f(&work);
            work[ti].as_slice_mut().unwrap()[e] = orig;
            g.as_slice_mut().unwrap()[e] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative L2 distance `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn l2_relative_error(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shape mismatch");
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
}

/// Compares analytic gradients against finite differences; returns the
/// per-tensor relative errors. Panics if counts disagree.
pub fn compare(
    names: &[&str],
    analytic: &[Arr],
    f: impl FnMut(&[Arr]) -> f64,
    inputs: &[Arr],
    h: f64,
) -> Vec<CheckResult> {
    assert_eq!(names.len(), inputs.len());
    assert_eq!(analytic.len(), inputs.len());
    let numeric = finite_diff(f, inputs, h);
    names
        .iter()
        .zip(analytic.iter().zip(numeric.iter()))
        .map(|(name, (a, n))| CheckResult {
            name: name.to_string(),
            rel_error: l2_relative_error(a, n),
        })
        .collect()
}

/// True when every tensor's relative error is within `tol`.
pub fn all_within(results: &[CheckResult], tol: f64) -> bool {
    results.iter().all(|r| r.rel_error <= tol)
}
