//! Training losses: Charbonnier, Laplacian edge loss, perceptual loss over a
//! pluggable feature extractor, the weighted restoration composite, and the
//! quantizer reconstruction loss.
//!
//! Every loss exists twice: a tape-level `*_t` form used inside training
//! graphs, and a plain-array form for evaluation and tests, which runs the
//! same code on a throwaway tape.

use crate::params::he_normal;
use crate::tape::{conv2d_fixed, mse, pad2d, Arr, PadMode, Tape, Var};
use crate::{LmqError, Result};
use ndarray::{Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Loss hyper-parameters, all strictly positive.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight of the summed quantizer losses in the coarse-mask objective.
    pub lambda_cb: f64,
    /// Weight of the perceptual term in the restoration objective.
    pub lambda1: f64,
    /// Weight of the edge term in the restoration objective.
    pub lambda2: f64,
    pub eps_edge: f64,
    pub eps_char: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cb: 0.25,
            lambda1: 0.1,
            lambda2: 0.05,
            eps_edge: 1e-5,
            eps_char: 1e-3,
        }
    }
}

// ---- tape-level losses ------------------------------------------------------

/// Smooth L1-like penalty: mean of sqrt((a−b)² + eps²).
pub fn charbonnier_t<'t>(a: Var<'t>, b: Var<'t>, eps: f64) -> Var<'t> {
    (a - b).square().add_scalar(eps * eps).sqrt().mean_all()
}

/// 4-neighbor Laplacian applied independently per channel of `(n, c, h, w)`,
/// reflect-padded so shape is preserved. Matches [`crate::laplace::laplace_filter`].
pub fn laplacian_t(x: Var) -> Var {
    let s = x.shape();
    assert_eq!(s.len(), 4, "laplacian expects (n, c, h, w)");
    let c = s[1];
    let mut k = Arr::zeros(IxDyn(&[c, 1, 3, 3]));
    for ci in 0..c {
        k[[ci, 0, 0, 1]] = 1.0;
        k[[ci, 0, 1, 0]] = 1.0;
        k[[ci, 0, 1, 1]] = -4.0;
        k[[ci, 0, 1, 2]] = 1.0;
        k[[ci, 0, 2, 1]] = 1.0;
    }
    conv2d_fixed(pad2d(x, 1, PadMode::Reflect), k, 1, c)
}

/// Charbonnier distance between the Laplacians of the two images.
pub fn edge_loss_t<'t>(a: Var<'t>, b: Var<'t>, eps: f64) -> Var<'t> {
    charbonnier_t(laplacian_t(a), laplacian_t(b), eps)
}

/// Produces feature stages for a `(n, c, h, w)` batch on the input's tape.
/// Implementations must be deterministic and must not train.
pub trait FeatureExtractor {
    fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>>;
}

/// Features = the input itself; perceptual loss degenerates to plain MSE.
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        Ok(vec![x])
    }
}

/// A frozen three-stage convolutional stack (3→8→16→32 channels, stride 2,
/// gelu). Default weights come from a fixed internal seed so results are
/// reproducible with no external files; weights can also be saved to and
/// loaded from a small binary file.
pub struct FrozenFeatures {
    stages: Vec<StageSpec>,
}

struct StageSpec {
    weight: Arr, // (c_out, c_in, k, k)
    stride: usize,
}

const FEATURE_SEED: u64 = 0x4c4d_5146;
const FEATURE_MAGIC: &[u8; 4] = b"LMQP";
const FEATURE_VERSION: u32 = 1;

impl FrozenFeatures {
    /// The default extractor: deterministic weights from the internal seed.
    pub fn seeded() -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(FEATURE_SEED);
        let dims = [(3usize, 8usize), (8, 16), (16, 32)];
        let stages = dims
            .iter()
            .map(|&(ci, co)| StageSpec {
                weight: he_normal(&mut rng, &[co, ci, 3, 3], ci * 9),
                stride: 2,
            })
            .collect();
        FrozenFeatures { stages }
    }

    /// Loads externally supplied stage weights.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(LmqError::config(format!(
                "{} is not a feature-weights file",
                path.display()
            )));
        }
        let version = read_u32(&mut f)?;
        if version != FEATURE_VERSION {
            return Err(LmqError::config(format!(
                "unsupported feature-weights version {version}"
            )));
        }
        let n_layers = read_u32(&mut f)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(LmqError::config(format!(
                "implausible feature stage count {n_layers}"
            )));
        }
        let mut stages = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let co = read_u32(&mut f)? as usize;
            let ci = read_u32(&mut f)? as usize;
            let k = read_u32(&mut f)? as usize;
            let stride = read_u32(&mut f)? as usize;
            if co == 0 || ci == 0 || k == 0 || stride == 0 {
                return Err(LmqError::config("zero dimension in feature weights"));
            }
            let n = co * ci * k * k;
            let mut data = vec![0.0f64; n];
            for v in &mut data {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(LmqError::config("non-finite feature weight"));
                }
            }
            stages.push(StageSpec {
                weight: Arr::from_shape_vec(IxDyn(&[co, ci, k, k]), data).unwrap(),
                stride,
            });
        }
        Ok(FrozenFeatures { stages })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(FEATURE_MAGIC)?;
        f.write_all(&FEATURE_VERSION.to_le_bytes())?;
        f.write_all(&(self.stages.len() as u32).to_le_bytes())?;
        for st in &self.stages {
            let s = st.weight.shape();
            for d in [s[0], s[1], s[2], st.stride] {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in st.weight.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl FeatureExtractor for FrozenFeatures {
    fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut cur = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let c_in = cur.shape()[1];
            let expected = st.weight.shape()[1];
            if c_in != expected {
                return Err(LmqError::config(format!(
                    "feature extractor expects {expected} channels, got {c_in}"
                )));
            }
            let pad = st.weight.shape()[2] / 2;
            cur = conv2d_fixed(pad2d(cur, pad, PadMode::Reflect), st.weight.clone(), st.stride, 1)
                .gelu();
            out.push(cur);
        }
        Ok(out)
    }
}

/// Mean over stages of the MSE between the two images' features.
pub fn perceptual_loss_t<'t>(
    a: Var<'t>,
    b: Var<'t>,
    extractor: &dyn FeatureExtractor,
) -> Result<Var<'t>> {
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(LmqError::config(
            "feature extractor must expose at least one stage, identically for both inputs",
        ));
    }
    let n = fa.len() as f64;
    let mut acc: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb.into_iter()) {
        let term = mse(x, y);
        acc = Some(match acc {
            Some(prev) => prev + term,
            None => term,
        });
    }
    Ok(acc.unwrap().scale(1.0 / n))
}

/// The restoration objective: charbonnier + λ1·perceptual + λ2·edge.
pub fn restoration_loss_t<'t>(
    pred: Var<'t>,
    gt: Var<'t>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<Var<'t>> {
    let c = charbonnier_t(pred, gt, weights.eps_char);
    let p = perceptual_loss_t(pred, gt, extractor)?;
    let e = edge_loss_t(pred, gt, weights.eps_edge);
    Ok(c + p.scale(weights.lambda1) + e.scale(weights.lambda2))
}

/// The coarse-mask objective: MSE plus λ_cb times the summed quantizer losses.
pub fn vqvae_loss_t<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    codebook_losses: &[Var<'t>],
    lambda_cb: f64,
) -> Var<'t> {
    let mut loss = mse(pred, target);
    for &cb in codebook_losses {
        loss = loss + cb.scale(lambda_cb);
    }
    loss
}

// ---- array-level wrappers ---------------------------------------------------

fn check_same_shape(a: &Arr, b: &Arr) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LmqError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Promotes `(c, h, w)` to a singleton batch; passes 4-d through.
fn to_batch(a: &Arr) -> Result<Arr> {
    match a.ndim() {
        3 => Ok(a.clone().insert_axis(Axis(0))),
        4 => Ok(a.clone()),
        d => Err(LmqError::invalid(format!(
            "expected 3-d or 4-d tensor, got {d}-d"
        ))),
    }
}

pub fn charbonnier(a: &Arr, b: &Arr, eps: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let t = Tape::new();
    Ok(charbonnier_t(t.leaf(a.clone()), t.leaf(b.clone()), eps).scalar())
}

pub fn edge_loss(a: &Arr, b: &Arr, eps: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let t = Tape::new();
    let av = t.leaf(to_batch(a)?);
    let bv = t.leaf(to_batch(b)?);
    Ok(edge_loss_t(av, bv, eps).scalar())
}

pub fn perceptual_loss(a: &Arr, b: &Arr, extractor: &dyn FeatureExtractor) -> Result<f64> {
    check_same_shape(a, b)?;
    let t = Tape::new();
    let av = t.leaf(to_batch(a)?);
    let bv = t.leaf(to_batch(b)?);
    Ok(perceptual_loss_t(av, bv, extractor)?.scalar())
}

pub fn restoration_loss(
    a: &Arr,
    b: &Arr,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    check_same_shape(a, b)?;
    let t = Tape::new();
    let av = t.leaf(to_batch(a)?);
    let bv = t.leaf(to_batch(b)?);
    Ok(restoration_loss_t(av, bv, weights, extractor)?.scalar())
}

/// Weighted sum of already-computed restoration terms.
pub fn combine_restoration_terms(
    char_term: f64,
    perceptual_term: f64,
    edge_term: f64,
    weights: &LossWeights,
) -> f64 {
    char_term + weights.lambda1 * perceptual_term + weights.lambda2 * edge_term
}

pub fn vqvae_loss(pred: &Arr, target: &Arr, codebook_losses: &[f64], lambda_cb: f64) -> Result<f64> {
    check_same_shape(pred, target)?;
    let mse: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(combine_vqvae_terms(mse, codebook_losses.iter().sum(), lambda_cb))
}

/// MSE plus λ_cb times the summed quantizer losses.
pub fn combine_vqvae_terms(mse: f64, codebook_sum: f64, lambda_cb: f64) -> f64 {
    mse + lambda_cb * codebook_sum
}
