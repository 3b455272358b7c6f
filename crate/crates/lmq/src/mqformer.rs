//! The recovery network: parallel transformer and convolutional encoders
//! guided by a downsampled coarse-mask pyramid, a hybrid decoder, a detail
//! refinement stage, and residual subtraction from the input.

use crate::layers::{BatchNorm2d, ChannelAttention, Conv2d, ConvTransposeDw, Mlp};
use crate::params::{Fwd, ParamStore};
use crate::tape::{
    adaptive_avg_pool, bmm, concat_channels, crop2d, nearest_up2, pad2d_rb, slice_channels,
    softmax_axis, transpose_last2, PadMode, Var,
};
use crate::{LmqError, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderLayout {
    /// Two separate streams (attention blocks and convolution blocks),
    /// fused per scale in the decoder.
    Parallel,
    /// One stream alternating the two block types.
    Hybrid,
}

#[derive(Clone, Copy, Debug)]
pub struct MqformerConfig {
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: [usize; 3],
    /// Query rows per attention block; 0 keeps one query per token.
    pub n_queries: usize,
    pub mlp_ratio: usize,
    pub ca_kernel: usize,
    /// Kernel (= stride) of the reduction and expansion convs around
    /// attention.
    pub reduction_kernel: usize,
    /// When false the coarse mask is ignored everywhere.
    pub use_mask: bool,
    pub layout: EncoderLayout,
}

impl Default for MqformerConfig {
    fn default() -> Self {
        MqformerConfig {
            stage_channels: [32, 64, 128],
            blocks_per_stage: [2, 2, 2],
            n_queries: 8,
            mlp_ratio: 4,
            ca_kernel: 7,
            reduction_kernel: 4,
            use_mask: true,
            layout: EncoderLayout::Parallel,
        }
    }
}

impl MqformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c < 4) {
            return Err(LmqError::config("stage channels must be >= 4"));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(LmqError::config("every stage needs at least one block"));
        }
        if self.mlp_ratio == 0 {
            return Err(LmqError::config("mlp_ratio must be >= 1"));
        }
        if self.ca_kernel % 2 == 0 {
            return Err(LmqError::config("ca_kernel must be odd"));
        }
        if self.reduction_kernel < 2 {
            return Err(LmqError::config("reduction_kernel must be >= 2"));
        }
        Ok(())
    }
}

/// Factors `n_q` into a pooling grid `(gh, gw)` with `gh <= gw`.
pub fn query_grid(n_q: usize) -> (usize, usize) {
    assert!(n_q >= 1);
    let mut gh = (n_q as f64).sqrt().floor() as usize;
    while n_q % gh != 0 {
        gh -= 1;
    }
    (gh, n_q / gh)
}

/// Softmax over all spatial positions, independently per channel.
pub fn spatial_softmax<'t>(m: Var<'t>) -> Var<'t> {
    let s = m.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    softmax_axis(m.reshape(&[n, c, h * w]), 2).reshape(&[n, c, h, w])
}

fn check_pair(x: &Var, m: &Var) -> Result<()> {
    if x.shape() != m.shape() {
        return Err(LmqError::invalid(format!(
            "feature/mask shape mismatch: {:?} vs {:?}",
            x.shape(),
            m.shape()
        )));
    }
    Ok(())
}

/// Mask-query attention: queries come from the mask-injected feature and are
/// pooled down to a small fixed count; keys and values are a channel split of
/// one projection; the attended summaries are spread back over positions and
/// expanded to input resolution.
pub struct Dmqa {
    rd_x: Conv2d,
    rd_m: Conv2d,
    kv: Conv2d,
    q: Conv2d,
    ep: ConvTransposeDw,
    pub n_q: usize,
    k: usize,
    c: usize,
}

/// Intermediate attention tensors, exposed for verification.
pub struct DmqaTrace<'t> {
    /// Row-stochastic attention `(n, n_q, tokens)`.
    pub attention: Var<'t>,
    /// Column-stochastic redistribution weights, same shape.
    pub redistribution: Var<'t>,
    /// Query summaries `(n, n_q, c)`.
    pub summaries: Var<'t>,
    /// Low-scale output field `(n, c, h/k, w/k)`.
    pub field: Var<'t>,
}

impl Dmqa {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        n_q: usize,
        k: usize,
    ) -> Self {
        Dmqa {
            rd_x: Conv2d::depthwise(ps, rng, &format!("{name}.rd_x"), c, k, k, 0),
            rd_m: Conv2d::depthwise(ps, rng, &format!("{name}.rd_m"), c, k, k, 0),
            kv: Conv2d::new(ps, rng, &format!("{name}.kv"), c, 2 * c, 1, 1, 0),
            q: Conv2d::new(ps, rng, &format!("{name}.q"), c, c, 1, 1, 0),
            ep: ConvTransposeDw::new(ps, rng, &format!("{name}.ep"), c, k),
            n_q,
            k,
            c,
        }
    }

    /// Forward pass that also returns the attention internals.
    pub fn forward_traced<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        x: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<(Var<'t>, DmqaTrace<'t>)> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.c, "channel count differs from construction");
        if h % self.k != 0 || w % self.k != 0 {
            return Err(LmqError::invalid(format!(
                "attention needs dims divisible by {}, got {h}x{w}",
                self.k
            )));
        }
        if let Some(m) = &mask {
            check_pair(&x, m)?;
        }
        let (hr, wr) = (h / self.k, w / self.k);
        let tokens = hr * wr;

        let rx = self.rd_x.forward(fw, x);
        let kv = self.kv.forward(fw, rx);
        let k_map = slice_channels(kv, 0, c);
        let v_map = slice_channels(kv, c, c);
        let q_in = match mask {
            Some(m) => rx + self.rd_m.forward(fw, m),
            None => rx,
        };
        let q_map = self.q.forward(fw, q_in);

        // token matrices: queries (n, n_q, c), keys (n, c, t), values (n, t, c)
        let q_tok = if self.n_q == 0 {
            transpose_last2(q_map.reshape(&[n, c, tokens]))
        } else {
            let (gh, gw) = query_grid(self.n_q);
            transpose_last2(adaptive_avg_pool(q_map, gh, gw).reshape(&[n, c, gh * gw]))
        };
        let k_tok = k_map.reshape(&[n, c, tokens]);
        let v_tok = transpose_last2(v_map.reshape(&[n, c, tokens]));

        let scores = bmm(q_tok, k_tok).scale(1.0 / (c as f64).sqrt());
        let attention = softmax_axis(scores, 2);
        let summaries = bmm(attention, v_tok);
        // spread summaries back: per token, a convex mix over queries
        let redistribution = softmax_axis(scores, 1);
        let field_tok = bmm(transpose_last2(redistribution), summaries);
        let field = transpose_last2(field_tok).reshape(&[n, c, hr, wr]);

        let out = self.ep.forward(fw, field);
        Ok((
            out,
            DmqaTrace {
                attention,
                redistribution,
                summaries,
                field,
            },
        ))
    }

    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        x: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_traced(fw, x, mask)?.0)
    }
}

/// Convolution branch gated by a spatial softmax of the mask feature; the
/// no-mask variant degenerates to uniform weights.
pub struct Mscb {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Mscb {
    pub fn new(
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
    ) -> Self {
        Mscb {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c, c, 3, 1, 1),
            bn: BatchNorm2d::new(ps, st, &format!("{name}.bn"), c),
        }
    }

    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        x: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        let area = (s[2] * s[3]) as f64;
        // normalize the branch input so the contribution added onto the
        // trunk stays O(1) at any depth
        let cx = self.conv.forward(fw, self.bn.forward(fw, x));
        Ok(match mask {
            Some(m) => {
                check_pair(&x, &m)?;
                x + cx * spatial_softmax(m)
            }
            None => x + cx.scale(1.0 / area),
        })
    }
}

/// Transformer block: attention and mask-gated convolution branches summed,
/// then a BatchNorm + MLP tail with a residual.
pub struct Mqtm {
    pub mscb: Mscb,
    pub dmqa: Dmqa,
    pub abn: BatchNorm2d,
    pub bn: BatchNorm2d,
    pub mlp: Mlp,
    k: usize,
}

impl Mqtm {
    pub fn new(
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        cfg: &MqformerConfig,
    ) -> Self {
        Mqtm {
            mscb: Mscb::new(ps, st, rng, &format!("{name}.mscb"), c),
            dmqa: Dmqa::new(
                ps,
                rng,
                &format!("{name}.dmqa"),
                c,
                cfg.n_queries,
                cfg.reduction_kernel,
            ),
            abn: BatchNorm2d::new(ps, st, &format!("{name}.abn"), c),
            bn: BatchNorm2d::new(ps, st, &format!("{name}.bn"), c),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), c, cfg.mlp_ratio),
            k: cfg.reduction_kernel,
        }
    }

    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        x: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if let Some(m) = &mask {
            check_pair(&x, m)?;
        }
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (pb, pr) = ((self.k - h % self.k) % self.k, (self.k - w % self.k) % self.k);
        // the attention branch reads a normalized copy of the trunk, rounded
        // up to the reduction stride; the convolution branch sees the
        // original extent
        let nx = self.abn.forward(fw, x);
        let d = if pb > 0 || pr > 0 {
            let xp = pad2d_rb(nx, pb, pr, PadMode::Reflect);
            let mp = mask.map(|m| pad2d_rb(m, pb, pr, PadMode::Reflect));
            crop2d(self.dmqa.forward(fw, xp, mp)?, 0, 0, h, w)
        } else {
            self.dmqa.forward(fw, nx, mask)?
        };
        let f = self.mscb.forward(fw, x, mask)? + d;
        Ok(f + self.mlp.forward(fw, self.bn.forward(fw, f)))
    }
}

/// Convolution block: mask injected additively, a 3×3 conv with a
/// channel-attention gate and residual, then the BatchNorm + MLP tail.
pub struct Cacm {
    pub conv: Conv2d,
    pub ca: ChannelAttention,
    pub cbn: BatchNorm2d,
    pub bn: BatchNorm2d,
    pub mlp: Mlp,
}

impl Cacm {
    pub fn new(
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        cfg: &MqformerConfig,
    ) -> Self {
        Cacm {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c, c, 3, 1, 1),
            ca: ChannelAttention::new(ps, rng, &format!("{name}.ca"), cfg.ca_kernel),
            cbn: BatchNorm2d::new(ps, st, &format!("{name}.cbn"), c),
            bn: BatchNorm2d::new(ps, st, &format!("{name}.bn"), c),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), c, cfg.mlp_ratio),
        }
    }

    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        f: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let h = match mask {
            Some(m) => {
                check_pair(&f, &m)?;
                f + m
            }
            None => f,
        };
        // gated branch reads a normalized copy so its scale is independent
        // of trunk depth
        let a = self.ca.forward(fw, self.conv.forward(fw, self.cbn.forward(fw, h)));
        let x = h + a;
        Ok(x + self.mlp.forward(fw, self.bn.forward(fw, x)))
    }
}

/// Decoder block: depthwise 7×7 conv, BatchNorm, pointwise MLP, residual.
pub struct ConvNextBlock {
    dw: Conv2d,
    bn: BatchNorm2d,
    mlp: Mlp,
}

impl ConvNextBlock {
    pub fn new(
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        ratio: usize,
    ) -> Self {
        ConvNextBlock {
            dw: Conv2d::depthwise(ps, rng, &format!("{name}.dw"), c, 7, 1, 3),
            bn: BatchNorm2d::new(ps, st, &format!("{name}.bn"), c),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), c, ratio),
        }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        x + self.mlp.forward(fw, self.bn.forward(fw, self.dw.forward(fw, x)))
    }
}

/// Full-resolution detail refinement on the residual branch.
pub struct Pde {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Pde {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Self {
        Pde {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), 3, 16, 3, 1, 1),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), 16, 3, 3, 1, 1),
        }
    }

    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, x: Var<'t>) -> Var<'t> {
        x + self.conv2.forward(fw, self.conv1.forward(fw, x).gelu())
    }
}

/// Stepwise stride-2 projections of the coarse mask to each stage's
/// resolution and width.
pub struct MaskPyramid {
    convs: [Conv2d; 3],
}

impl MaskPyramid {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        stage_channels: [usize; 3],
    ) -> Self {
        let [c1, c2, c3] = stage_channels;
        MaskPyramid {
            convs: [
                Conv2d::new(ps, rng, &format!("{name}.l1"), 1, c1, 3, 2, 1),
                Conv2d::new(ps, rng, &format!("{name}.l2"), c1, c2, 3, 2, 1),
                Conv2d::new(ps, rng, &format!("{name}.l3"), c2, c3, 3, 2, 1),
            ],
        }
    }

    /// `(n, 1, h, w)` mask, dims divisible by 4 → three levels at half,
    /// quarter, and eighth resolution.
    pub fn forward<'t>(&self, fw: &Fwd<'t, '_>, mask: Var<'t>) -> Result<[Var<'t>; 3]> {
        let s = mask.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(LmqError::invalid(format!(
                "expected (n, 1, h, w) mask, got {s:?}"
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(LmqError::invalid(format!(
                "mask dims must be divisible by 4, got {}x{}",
                s[2], s[3]
            )));
        }
        let a = self.convs[0].forward(fw, mask);
        let b = self.convs[1].forward(fw, a);
        let c = self.convs[2].forward(fw, b);
        Ok([a, b, c])
    }
}

enum EncBlock {
    Attention(Mqtm),
    Convolution(Cacm),
}

impl EncBlock {
    fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        x: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        match self {
            EncBlock::Attention(b) => b.forward(fw, x, mask),
            EncBlock::Convolution(b) => b.forward(fw, x, mask),
        }
    }
}

struct EncoderStream {
    stem: Conv2d,
    stages: [Vec<EncBlock>; 3],
    downs: [Conv2d; 2],
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StreamKind {
    Attention,
    Convolution,
    Mixed,
}

impl EncoderStream {
    fn new(
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &MqformerConfig,
        kind: StreamKind,
    ) -> Self {
        let [c1, c2, c3] = cfg.stage_channels;
        let stem = Conv2d::new(ps, rng, &format!("{name}.stem"), 3, c1, 3, 2, 1);
        let mut stages: [Vec<EncBlock>; 3] = [vec![], vec![], vec![]];
        for (si, stage) in stages.iter_mut().enumerate() {
            let c = cfg.stage_channels[si];
            for bi in 0..cfg.blocks_per_stage[si] {
                let bname = format!("{name}.s{}.b{}", si + 1, bi);
                let attention = match kind {
                    StreamKind::Attention => true,
                    StreamKind::Convolution => false,
                    StreamKind::Mixed => bi % 2 == 0,
                };
                stage.push(if attention {
                    EncBlock::Attention(Mqtm::new(ps, st, rng, &bname, c, cfg))
                } else {
                    EncBlock::Convolution(Cacm::new(ps, st, rng, &bname, c, cfg))
                });
            }
        }
        let downs = [
            Conv2d::new(ps, rng, &format!("{name}.down1"), c1, c2, 3, 2, 1),
            Conv2d::new(ps, rng, &format!("{name}.down2"), c2, c3, 3, 2, 1),
        ];
        EncoderStream { stem, stages, downs }
    }

    fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        img: Var<'t>,
        pyramid: Option<&[Var<'t>; 3]>,
    ) -> Result<[Var<'t>; 3]> {
        let mut x = self.stem.forward(fw, img);
        let mut feats = Vec::with_capacity(3);
        for si in 0..3 {
            let mask = pyramid.map(|p| p[si]);
            for block in &self.stages[si] {
                x = block.forward(fw, x, mask)?;
            }
            feats.push(x);
            if si < 2 {
                x = self.downs[si].forward(fw, x);
            }
        }
        Ok([feats[0], feats[1], feats[2]])
    }
}

/// Tape-level outputs of the recovery network; `restored` is unclamped.
pub struct MqformerOutput<'t> {
    pub residual: Var<'t>,
    pub restored: Var<'t>,
}

/// The recovery network.
pub struct Mqformer {
    pub cfg: MqformerConfig,
    pyramid: Option<MaskPyramid>,
    stream_a: EncoderStream,
    stream_b: Option<EncoderStream>,
    fuse: [Conv2d; 3],
    dec: [ConvNextBlock; 3],
    ups: [Conv2d; 2],
    head_bn: BatchNorm2d,
    head: Conv2d,
    final_proj: Conv2d,
    pde: Pde,
}

impl Mqformer {
    pub fn new(
        cfg: &MqformerConfig,
        ps: &mut ParamStore,
        st: &mut crate::params::StateStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.stage_channels;
        let pyramid = cfg
            .use_mask
            .then(|| MaskPyramid::new(ps, rng, "mq.pyr", cfg.stage_channels));
        let (stream_a, stream_b) = match cfg.layout {
            EncoderLayout::Parallel => (
                EncoderStream::new(ps, st, rng, "mq.enc_t", cfg, StreamKind::Attention),
                Some(EncoderStream::new(
                    ps,
                    st,
                    rng,
                    "mq.enc_c",
                    cfg,
                    StreamKind::Convolution,
                )),
            ),
            EncoderLayout::Hybrid => (
                EncoderStream::new(ps, st, rng, "mq.enc", cfg, StreamKind::Mixed),
                None,
            ),
        };
        let fuse_in = |c: usize| match cfg.layout {
            EncoderLayout::Parallel => 2 * c,
            EncoderLayout::Hybrid => c,
        };
        let fuse = [
            Conv2d::new(ps, rng, "mq.fuse1", fuse_in(c1), c1, 1, 1, 0),
            Conv2d::new(ps, rng, "mq.fuse2", fuse_in(c2), c2, 1, 1, 0),
            Conv2d::new(ps, rng, "mq.fuse3", fuse_in(c3), c3, 1, 1, 0),
        ];
        let dec = [
            ConvNextBlock::new(ps, st, rng, "mq.dec1", c1, cfg.mlp_ratio),
            ConvNextBlock::new(ps, st, rng, "mq.dec2", c2, cfg.mlp_ratio),
            ConvNextBlock::new(ps, st, rng, "mq.dec3", c3, cfg.mlp_ratio),
        ];
        let ups = [
            Conv2d::new(ps, rng, "mq.up32", c3, c2, 3, 1, 1),
            Conv2d::new(ps, rng, "mq.up21", c2, c1, 3, 1, 1),
        ];
        let head_bn = BatchNorm2d::new(ps, st, "mq.head_bn", c1);
        let head = Conv2d::new(ps, rng, "mq.head", c1, 16, 3, 1, 1);
        // a small but live start: the restoration begins near the identity
        // while every upstream parameter still sees a usable gradient
        let final_proj = Conv2d::scaled(ps, rng, "mq.final", 16, 3, 3, 1, 1, 1e-2);
        let pde = Pde::new(ps, rng, "mq.pde");
        Ok(Mqformer {
            cfg: *cfg,
            pyramid,
            stream_a,
            stream_b,
            fuse,
            dec,
            ups,
            head_bn,
            head,
            final_proj,
            pde,
        })
    }

    /// `img` is `(n, 3, h, w)` with dims divisible by 8 and at least 32;
    /// `cmask` is the `(n, 1, h, w)` coarse mask (ignored when the config
    /// disables mask guidance).
    pub fn forward<'t>(
        &self,
        fw: &Fwd<'t, '_>,
        img: Var<'t>,
        cmask: Var<'t>,
    ) -> Result<MqformerOutput<'t>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(LmqError::invalid(format!(
                "expected (n, 3, h, w) input, got {s:?}"
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 || h < 32 || w < 32 {
            return Err(LmqError::invalid(format!(
                "spatial dims must be divisible by 8 and at least 32, got {h}x{w}"
            )));
        }
        if cmask.shape() != vec![n, 1, h, w] {
            return Err(LmqError::invalid(format!(
                "coarse mask must be (n, 1, h, w), got {:?}",
                cmask.shape()
            )));
        }

        let pyr = match &self.pyramid {
            Some(p) => Some(p.forward(fw, cmask)?),
            None => None,
        };
        let feats_a = self.stream_a.forward(fw, img, pyr.as_ref())?;
        let fused: Vec<Var<'t>> = match &self.stream_b {
            Some(sb) => {
                let feats_b = sb.forward(fw, img, pyr.as_ref())?;
                (0..3)
                    .map(|i| {
                        self.fuse[i].forward(fw, concat_channels(&[feats_a[i], feats_b[i]]))
                    })
                    .collect()
            }
            None => (0..3).map(|i| self.fuse[i].forward(fw, feats_a[i])).collect(),
        };

        let up = |fw: &Fwd<'t, '_>, conv: &Conv2d, x: Var<'t>| conv.forward(fw, nearest_up2(x));
        let d3 = self.dec[2].forward(fw, fused[2]);
        let d2 = self.dec[1].forward(fw, fused[1] + up(fw, &self.ups[0], d3));
        let d1 = self.dec[0].forward(fw, fused[0] + up(fw, &self.ups[1], d2));

        let hr = up(fw, &self.head, self.head_bn.forward(fw, d1)).gelu();
        let residual = self.pde.forward(fw, self.final_proj.forward(fw, hr));
        let restored = img - residual;
        Ok(MqformerOutput { residual, restored })
    }
}
