//! Layer wrappers: each owns parameter handles in a [`ParamStore`] and runs
//! forward on a tape through the [`Fwd`] context.

use crate::params::{he_normal, zeros, BufId, Fwd, ParamId, ParamStore, StateAccess, StateStore};
use crate::tape::{
    batchnorm2d, conv1d_channels, conv2d, conv_transpose_dw, global_avg_pool, mul_channel_gate,
    pad2d, BnMode, PadMode, Var,
};
use ndarray::Array1;
use rand::Rng;

/// Standard or depthwise 2-d convolution with reflect/zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            he_normal(rng, &[c_out, c_in, k, k], c_in * k * k),
        );
        let b = ps.add(&format!("{name}.b"), zeros(&[c_out]));
        Conv2d {
            w,
            b: Some(b),
            stride,
            pad,
            pad_mode: PadMode::Reflect,
            groups: 1,
        }
    }

    /// Depthwise variant: one k×k filter per channel.
    pub fn depthwise(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), he_normal(rng, &[c, 1, k, k], k * k));
        let b = ps.add(&format!("{name}.b"), zeros(&[c]));
        Conv2d {
            w,
            b: Some(b),
            stride,
            pad,
            pad_mode: PadMode::Reflect,
            groups: c,
        }
    }

    /// All-zero weights and bias: the layer starts as the constant-zero map.
    pub fn zero_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), zeros(&[c_out, c_in, k, k]));
        let b = ps.add(&format!("{name}.b"), zeros(&[c_out]));
        Conv2d {
            w,
            b: Some(b),
            stride,
            pad,
            pad_mode: PadMode::Reflect,
            groups: 1,
        }
    }

    /// He init with the weights scaled by `gain`. A gain well below 1 keeps
    /// the layer's output small at the start without silencing upstream
    /// gradients the way an all-zero start would.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let mut w = he_normal(rng, &[c_out, c_in, k, k], c_in * k * k);
        w.mapv_inplace(|v| v * gain);
        let w = ps.add(&format!("{name}.w"), w);
        let b = ps.add(&format!("{name}.b"), zeros(&[c_out]));
        Conv2d {
            w,
            b: Some(b),
            stride,
            pad,
            pad_mode: PadMode::Reflect,
            groups: 1,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        let x = if self.pad > 0 {
            pad2d(x, self.pad, self.pad_mode)
        } else {
            x
        };
        conv2d(
            x,
            fw.var(self.w),
            self.b.map(|b| fw.var(b)),
            self.stride,
            self.groups,
        )
    }
}

/// Depthwise transposed convolution with kernel == stride (tile expansion).
#[derive(Clone, Copy, Debug)]
pub struct ConvTransposeDw {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvTransposeDw {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, k: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), he_normal(rng, &[c, k, k], k * k));
        let b = ps.add(&format!("{name}.b"), zeros(&[c]));
        ConvTransposeDw { w, b, k }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        conv_transpose_dw(x, fw.var(self.w), Some(fw.var(self.b)), self.k)
    }
}

/// Batch normalization over (n, h, w) per channel, with running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean_buf: BufId,
    pub var_buf: BufId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, st: &mut StateStore, name: &str, c: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), Array1::ones(c).into_dyn());
        let beta = ps.add(&format!("{name}.beta"), zeros(&[c]));
        let mean_buf = st.add(&format!("{name}.running_mean"), Array1::zeros(c));
        let var_buf = st.add(&format!("{name}.running_var"), Array1::ones(c));
        BatchNorm2d {
            gamma,
            beta,
            mean_buf,
            var_buf,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        let gamma = fw.var(self.gamma);
        let beta = fw.var(self.beta);
        match &fw.state {
            StateAccess::Train(cell) if fw.training => {
                let mut st = cell.borrow_mut();
                let (mean, var) = st.pair_mut(self.mean_buf, self.var_buf);
                batchnorm2d(
                    x,
                    gamma,
                    beta,
                    BnMode::Train {
                        running_mean: mean,
                        running_var: var,
                        momentum: self.momentum,
                    },
                    self.eps,
                )
            }
            StateAccess::Train(cell) => {
                let st = cell.borrow();
                let mode = BnMode::Eval {
                    running_mean: st.get(self.mean_buf),
                    running_var: st.get(self.var_buf),
                };
                batchnorm2d(x, gamma, beta, mode, self.eps)
            }
            StateAccess::Eval(st) => {
                let mode = BnMode::Eval {
                    running_mean: st.get(self.mean_buf),
                    running_var: st.get(self.var_buf),
                };
                batchnorm2d(x, gamma, beta, mode, self.eps)
            }
        }
    }
}

/// Two pointwise convolutions with a gelu between, expansion `ratio`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, ratio: usize) -> Self {
        let hidden = c * ratio;
        let fc1 = Conv2d::new(ps, rng, &format!("{name}.fc1"), c, hidden, 1, 1, 0);
        let fc2 = Conv2d::new(ps, rng, &format!("{name}.fc2"), hidden, c, 1, 1, 0);
        Mlp { fc1, fc2 }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(fw, self.fc1.forward(fw, x).gelu())
    }
}

/// Channel attention: global average pool, a 1-d convolution across the
/// channel axis, sigmoid, then a per-channel gate on the input.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub w: ParamId,
    pub k: usize,
}

impl ChannelAttention {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, k: usize) -> Self {
        assert!(k % 2 == 1, "channel attention kernel must be odd");
        let w = ps.add(&format!("{name}.w"), he_normal(rng, &[k], k));
        ChannelAttention { w, k }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        let pooled = global_avg_pool(x);
        let gate = conv1d_channels(pooled, fw.var(self.w)).sigmoid();
        mul_channel_gate(x, gate)
    }
}
