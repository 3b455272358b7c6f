//! The coarse-mask generator: a small encoder–decoder over the
//! Laplace-filtered gray image, with spatial-attention convolution blocks
//! (SACM), three stride-2 downsampling stages, codebook quantization at the
//! two lowest scales, and a plain skip from the highest scale.

use crate::img::{ImageTensor, LaplaceMap};
use crate::laplace::{laplace_filter, to_grayscale};
use crate::layers::Conv2d;
use crate::params::{uniform_init, Fwd, ParamId, ParamStore, StateStore};
use crate::tape::{
    channel_avg, channel_max, concat_channels, gather_rows, mse, mul_spatial_gate, nearest_up2,
    nhwc_to_nchw, straight_through, Arr, PadMode, Tape, Var,
};
use crate::{LmqError, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct VqvaeConfig {
    pub base_channels: usize,
    /// Entries per codebook (two quantized levels, same size each).
    pub codebook_size: usize,
    /// Weight of the encoder-commitment half of the quantizer loss.
    pub commitment_beta: f64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig {
            base_channels: 24,
            codebook_size: 512,
            commitment_beta: 0.25,
        }
    }
}

impl VqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(LmqError::config("base_channels must be >= 4"));
        }
        if self.codebook_size < 2 {
            return Err(LmqError::config("codebook_size must be >= 2"));
        }
        if self.commitment_beta <= 0.0 {
            return Err(LmqError::config("commitment_beta must be positive"));
        }
        Ok(())
    }
}

/// Embedding table with `k` rows of dimension `d`.
#[derive(Clone, Debug)]
pub struct Codebook {
    embeddings: Array2<f64>,
}

impl Codebook {
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.nrows() < 2 {
            return Err(LmqError::invalid("codebook needs at least 2 rows"));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(LmqError::invalid("codebook entries must be finite"));
        }
        Ok(Codebook { embeddings })
    }

    /// Fresh table, uniform in [-1/k, 1/k].
    pub fn init(k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / k as f64;
        let flat = uniform_init(rng, &[k, d], bound);
        Codebook::new(
            Array2::from_shape_vec((k, d), flat.into_raw_vec_and_offset().0).unwrap(),
        )
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Result of quantizing a feature map against a codebook.
pub struct QuantizeResult {
    /// Same shape as the input; every channel vector is a codebook row.
    pub z_q: Arr,
    /// Chosen row per spatial position, `(n, h, w)`.
    pub indices: ArrayD<u32>,
    pub codebook_loss: f64,
}

/// Nearest codebook row per spatial position of `(n, d, h, w)`, L2 metric,
/// lowest index on ties.
fn nearest_indices(z: &Arr, cb: &Array2<f64>) -> Vec<u32> {
    let s = z.shape();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let k = cb.nrows();
    let zs = z.as_slice().unwrap();
    let cs = cb.as_slice().unwrap();
    let mut idx = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for p in 0..h * w {
            let mut best = f64::INFINITY;
            let mut bi = 0u32;
            for r in 0..k {
                let row = &cs[r * d..(r + 1) * d];
                let mut dist = 0.0;
                for ci in 0..d {
                    let diff = zs[(ni * d + ci) * h * w + p] - row[ci];
                    dist += diff * diff;
                }
                if dist < best {
                    best = dist;
                    bi = r as u32;
                }
            }
            idx.push(bi);
        }
    }
    idx
}

/// Array-level quantization: nearest rows, straight-copy values, and the
/// combined quantizer loss value (codebook + β·commitment, mean reduction —
/// both halves share the same squared distances, so the value is
/// `(1 + β)·mean‖z − e‖²`; they differ only in which side gradients reach).
pub fn quantize(z_e: &Arr, codebook: &Codebook, beta: f64) -> Result<QuantizeResult> {
    let zb = match z_e.ndim() {
        3 => z_e.clone().insert_axis(Axis(0)),
        4 => z_e.clone(),
        d => {
            return Err(LmqError::invalid(format!(
                "quantize expects (d, h, w) or (n, d, h, w), got {d}-d"
            )))
        }
    };
    let s = zb.shape().to_vec();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d != codebook.dim() {
        return Err(LmqError::invalid(format!(
            "channel dim {d} does not match embedding dim {}",
            codebook.dim()
        )));
    }
    let idx = nearest_indices(&zb, codebook.embeddings());
    let mut z_q = zb.clone();
    let mut sq_sum = 0.0;
    {
        let qs = z_q.as_slice_mut().unwrap();
        let zs = zb.as_slice().unwrap();
        let cs = codebook.embeddings().as_slice().unwrap();
        for ni in 0..n {
            for p in 0..h * w {
                let row = idx[ni * h * w + p] as usize;
                for ci in 0..d {
                    let e = cs[row * d + ci];
                    let z = zs[(ni * d + ci) * h * w + p];
                    qs[(ni * d + ci) * h * w + p] = e;
                    sq_sum += (z - e) * (z - e);
                }
            }
        }
    }
    let mean_sq = sq_sum / zb.len() as f64;
    let z_q = if z_e.ndim() == 3 {
        z_q.remove_axis(Axis(0))
    } else {
        z_q
    };
    Ok(QuantizeResult {
        z_q,
        indices: ArrayD::from_shape_vec(IxDyn(&[n, h, w]), idx).unwrap(),
        codebook_loss: (1.0 + beta) * mean_sq,
    })
}

/// Tape-level quantization for training. Returns the straight-through
/// quantized map (gradient flows to `z_e` as identity), the quantizer loss
/// node (codebook half updates the table, commitment half pulls the encoder),
/// and the chosen indices.
pub fn quantize_t<'t>(
    z_e: Var<'t>,
    codebook: Var<'t>,
    beta: f64,
) -> (Var<'t>, Var<'t>, Vec<u32>) {
    let s = z_e.shape();
    assert_eq!(s.len(), 4, "quantize_t expects (n, d, h, w)");
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let cb_shape = codebook.shape();
    assert_eq!(cb_shape[1], d, "embedding dim mismatch");
    let zv = z_e.value();
    let cbv = codebook.value();
    let cb2 = Array2::from_shape_vec(
        (cb_shape[0], d),
        cbv.as_slice().unwrap().to_vec(),
    )
    .unwrap();
    let idx = nearest_indices(&zv, &cb2);

    let picked = nhwc_to_nchw(gather_rows(codebook, idx.clone()).reshape(&[n, h, w, d]));
    let codebook_half = mse(picked, z_e.detach());
    let commitment_half = mse(z_e, picked.detach());
    let quantizer_loss = codebook_half + commitment_half.scale(beta);
    let z_q = straight_through(z_e, picked.value());
    (z_q, quantizer_loss, idx)
}

/// Spatial-attention convolution block: a 3×3 convolution with gelu, gated
/// per pixel by a logistic map of the channel mean and maximum, then a second
/// 3×3 convolution.
#[derive(Clone, Copy, Debug)]
pub struct Sacm {
    pub conv1: Conv2d,
    pub gate: Conv2d,
    pub conv2: Conv2d,
}

impl Sacm {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        Sacm {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), c, c, 3, 1, 1),
            // zero padding: the gate runs on channel-stat maps that can be as
            // small as 2x2 at the lowest scale, where reflect is undefined
            gate: Conv2d::new(ps, rng, &format!("{name}.gate"), 2, 1, 7, 1, 3)
                .with_pad_mode(PadMode::Zero),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), c, c, 3, 1, 1),
        }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(fw, x).gelu();
        let stats = concat_channels(&[channel_avg(h), channel_max(h)]);
        let gate = self.gate.forward(fw, stats).sigmoid();
        self.conv2.forward(fw, mul_spatial_gate(h, gate))
    }
}

/// `nearest_up2` followed by a 3×3 convolution.
#[derive(Clone, Copy, Debug)]
struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        UpBlock {
            conv: Conv2d::new(ps, rng, name, c_in, c_out, 3, 1, 1),
        }
    }

    fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.conv.forward(fw, nearest_up2(x))
    }
}

/// Whether the discrete codebook step runs or is bypassed (z_q = z_e).
/// Bypass keeps the whole network differentiable end to end, which the
/// finite-difference gradient suite relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    Quantized,
    Bypass,
}

/// Output of one coarse-mask forward pass.
pub struct VqvaeOutput<'t> {
    /// `(n, 1, h, w)` coarse mask at input resolution.
    pub cmask: Var<'t>,
    /// One quantizer loss node per codebook level (low scale first).
    pub codebook_losses: Vec<Var<'t>>,
    /// Chosen codebook rows per level (empty in bypass mode).
    pub indices: Vec<Vec<u32>>,
}

/// The coarse-mask generator.
pub struct LaplaceVqvae {
    pub cfg: VqvaeConfig,
    stem: Conv2d,
    stem_sacm: Sacm,
    down: [Conv2d; 3],
    down_sacm: [Sacm; 3],
    codebook_low: ParamId,
    codebook_mid: ParamId,
    up_low: UpBlock,
    dec_sacm_mid: Sacm,
    up_mid: UpBlock,
    dec_sacm_high: Sacm,
    up_high: UpBlock,
    head: Conv2d,
}

impl LaplaceVqvae {
    pub fn new(cfg: &VqvaeConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let k = cfg.codebook_size;
        let bound = 1.0 / k as f64;
        let stem = Conv2d::new(ps, rng, "vqvae.stem", 1, c, 3, 1, 1);
        let stem_sacm = Sacm::new(ps, rng, "vqvae.stem_sacm", c);
        let down = [
            Conv2d::new(ps, rng, "vqvae.down1", c, c, 3, 2, 1),
            Conv2d::new(ps, rng, "vqvae.down2", c, c, 3, 2, 1),
            Conv2d::new(ps, rng, "vqvae.down3", c, c, 3, 2, 1),
        ];
        let down_sacm = [
            Sacm::new(ps, rng, "vqvae.down1_sacm", c),
            Sacm::new(ps, rng, "vqvae.down2_sacm", c),
            Sacm::new(ps, rng, "vqvae.down3_sacm", c),
        ];
        let codebook_low = ps.add("vqvae.codebook_low", uniform_init(rng, &[k, c], bound));
        let codebook_mid = ps.add("vqvae.codebook_mid", uniform_init(rng, &[k, c], bound));
        let up_low = UpBlock::new(ps, rng, "vqvae.up_low", c, c);
        let dec_sacm_mid = Sacm::new(ps, rng, "vqvae.dec_mid_sacm", c);
        let up_mid = UpBlock::new(ps, rng, "vqvae.up_mid", c, c);
        let dec_sacm_high = Sacm::new(ps, rng, "vqvae.dec_high_sacm", c);
        let up_high = UpBlock::new(ps, rng, "vqvae.up_high", c, c);
        let head = Conv2d::new(ps, rng, "vqvae.head", c, 1, 3, 1, 1);
        Ok(LaplaceVqvae {
            cfg: *cfg,
            stem,
            stem_sacm,
            down,
            down_sacm,
            codebook_low,
            codebook_mid,
            up_low,
            dec_sacm_mid,
            up_mid,
            dec_sacm_high,
            up_high,
            head,
        })
    }

    /// Forward over an already Laplace-filtered `(n, 1, h, w)` input.
    /// Spatial dims must be divisible by 8 (three stride-2 stages).
    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        lap: Var<'t>,
        mode: QuantizeMode,
    ) -> Result<VqvaeOutput<'t>> {
        let s = lap.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(LmqError::invalid(format!(
                "expected (n, 1, h, w) input, got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(LmqError::invalid(format!(
                "spatial dims must be divisible by 8 and at least 16, got {h}x{w}"
            )));
        }
        let beta = self.cfg.commitment_beta;

        let x0 = self.stem_sacm.forward(fw, self.stem.forward(fw, lap));
        let x1 = self.down_sacm[0].forward(fw, self.down[0].forward(fw, x0));
        let x2 = self.down_sacm[1].forward(fw, self.down[1].forward(fw, x1));
        let x3 = self.down_sacm[2].forward(fw, self.down[2].forward(fw, x2));

        let (q_low, loss_low, idx_low, q_mid, loss_mid, idx_mid) = match mode {
            QuantizeMode::Quantized => {
                let (q3, l3, i3) = quantize_t(x3, fw.var(self.codebook_low), beta);
                let (q2, l2, i2) = quantize_t(x2, fw.var(self.codebook_mid), beta);
                (q3, l3, i3, q2, l2, i2)
            }
            QuantizeMode::Bypass => {
                let zero1 = fw.tape.leaf(crate::tape::scalar(0.0));
                let zero2 = fw.tape.leaf(crate::tape::scalar(0.0));
                (x3, zero1, vec![], x2, zero2, vec![])
            }
        };

        let d2 = self.up_low.forward(fw, q_low);
        let d2 = self.dec_sacm_mid.forward(fw, d2 + q_mid);
        let d1 = self.up_mid.forward(fw, d2);
        let d1 = self.dec_sacm_high.forward(fw, d1 + x1);
        let d0 = self.up_high.forward(fw, d1);
        let cmask = self.head.forward(fw, d0);

        Ok(VqvaeOutput {
            cmask,
            codebook_losses: vec![loss_low, loss_mid],
            indices: vec![idx_low, idx_mid],
        })
    }
}

/// Whole-image inference: grayscale → Laplacian → model (eval, quantized) →
/// coarse mask plus the per-level quantizer loss values.
pub fn vqvae_forward(
    img: &ImageTensor,
    model: &LaplaceVqvae,
    params: &ParamStore,
    state: &StateStore,
) -> Result<(LaplaceMap, Vec<f64>)> {
    let gray = to_grayscale(img)?;
    let lap = laplace_filter(&gray)?;
    let (h, w) = (lap.height(), lap.width());
    let tape = Tape::new();
    let fw = Fwd::eval(&tape, params, state);
    let input = tape.leaf(lap.data().clone().into_dyn().insert_axis(Axis(0)));
    let out = model.forward(&fw, input, QuantizeMode::Quantized)?;
    let losses = out.codebook_losses.iter().map(|l| l.scalar()).collect();
    let mask = out.cmask.value();
    let mask3 = mask
        .into_shape_with_order(IxDyn(&[1, h, w]))
        .unwrap()
        .into_dimensionality()
        .unwrap();
    Ok((LaplaceMap::new(mask3)?, losses))
}

/// Exact count of trainable scalars in a parameter store.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.count_scalars()
}
