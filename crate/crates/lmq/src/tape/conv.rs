//! Spatial operators: convolutions (im2col + GEMM), transposed depthwise
//! expansion, padding, cropping, pooling, upsampling, per-channel reductions
//! and codebook gather/straight-through.
//!
//! All kernels parallelize over disjoint output slices (or reduce partials in
//! a fixed order), so results are bit-identical regardless of thread count.

use super::{Arr, BackCtx, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn sl(a: &Arr) -> &[f64] {
    a.as_slice().expect("tape arrays are standard layout")
}

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Scatters `cols` (ci*kh*kw, ho*wo) back into an input-shaped buffer.
fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let l = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * l;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    let dst = (c * h + iy) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        dx[dst + ox * stride + kj] += cols[src + ox];
                    }
                }
            }
        }
    }
}

fn im2col(
    x: &[f64],
    cols: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let l = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * l;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    let src = (c * h + iy) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        cols[dst + ox] = x[src + ox * stride + kj];
                    }
                }
            }
        }
    }
}

fn conv_out_size(h: usize, k: usize, stride: usize) -> usize {
    assert!(h >= k, "input {h} smaller than kernel {k}");
    (h - k) / stride + 1
}

/// Dense (groups=1) convolution forward for one already-padded batch.
fn conv_forward_dense(
    x: &Arr,
    wmat: &ArrayView2<f64>,
    bias: Option<&Arr>,
    stride: usize,
    kh: usize,
    kw: usize,
) -> Arr {
    let (n, ci, h, w) = dims4(x);
    let co = wmat.nrows();
    let ho = conv_out_size(h, kh, stride);
    let wo = conv_out_size(w, kw, stride);
    let l = ho * wo;
    let mut out = Arr::zeros(IxDyn(&[n, co, ho, wo]));
    let xs = sl(x);
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(co * l)
        .enumerate()
        .for_each(|(ni, on)| {
            let xn = &xs[ni * ci * h * w..(ni + 1) * ci * h * w];
            let mut outv = ArrayViewMut2::from_shape((co, l), on).unwrap();
            if kh == 1 && kw == 1 && stride == 1 {
                let xv = ArrayView2::from_shape((ci, l), xn).unwrap();
                general_mat_mul(1.0, wmat, &xv, 0.0, &mut outv);
            } else {
                let mut cols = vec![0.0; ci * kh * kw * l];
                im2col(xn, &mut cols, ci, h, w, kh, kw, stride, ho, wo);
                let cv = ArrayView2::from_shape((ci * kh * kw, l), cols.as_slice()).unwrap();
                general_mat_mul(1.0, wmat, &cv, 0.0, &mut outv);
            }
            if let Some(b) = bias {
                let bs = sl(b);
                for c in 0..co {
                    for v in &mut on[c * l..(c + 1) * l] {
                        *v += bs[c];
                    }
                }
            }
        });
    out
}

fn conv_backward_dense(
    x: &Arr,
    wmat: &ArrayView2<f64>,
    g: &Arr,
    stride: usize,
    kh: usize,
    kw: usize,
    want_dw: bool,
) -> (Arr, Option<Arr>, Option<Arr>) {
    let (n, ci, h, w) = dims4(x);
    let (_, co, ho, wo) = dims4(g);
    let l = ho * wo;
    let xs = sl(x);
    let gs = sl(g);
    let ckk = ci * kh * kw;

    let mut dx = Arr::zeros(x.raw_dim());
    dx.as_slice_mut()
        .unwrap()
        .par_chunks_mut(ci * h * w)
        .enumerate()
        .for_each(|(ni, dxn)| {
            let gn = &gs[ni * co * l..(ni + 1) * co * l];
            let gv = ArrayView2::from_shape((co, l), gn).unwrap();
            if kh == 1 && kw == 1 && stride == 1 {
                let mut dxv = ArrayViewMut2::from_shape((ci, l), dxn).unwrap();
                general_mat_mul(1.0, &wmat.t(), &gv, 0.0, &mut dxv);
            } else {
                let mut dcols = vec![0.0; ckk * l];
                let mut dcv = ArrayViewMut2::from_shape((ckk, l), dcols.as_mut_slice()).unwrap();
                general_mat_mul(1.0, &wmat.t(), &gv, 0.0, &mut dcv);
                col2im_add(&dcols, dxn, ci, h, w, kh, kw, stride, ho, wo);
            }
        });

    let (dw, db) = if want_dw {
        // Per-sample partials summed in index order for determinism.
        let partials: Vec<ndarray::Array2<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xn = &xs[ni * ci * h * w..(ni + 1) * ci * h * w];
                let gn = &gs[ni * co * l..(ni + 1) * co * l];
                let gv = ArrayView2::from_shape((co, l), gn).unwrap();
                let mut dwn = ndarray::Array2::zeros((co, ckk));
                if kh == 1 && kw == 1 && stride == 1 {
                    let xv = ArrayView2::from_shape((ci, l), xn).unwrap();
                    general_mat_mul(1.0, &gv, &xv.t(), 0.0, &mut dwn.view_mut());
                } else {
                    let mut cols = vec![0.0; ckk * l];
                    im2col(xn, &mut cols, ci, h, w, kh, kw, stride, ho, wo);
                    let cv = ArrayView2::from_shape((ckk, l), cols.as_slice()).unwrap();
                    general_mat_mul(1.0, &gv, &cv.t(), 0.0, &mut dwn.view_mut());
                }
                dwn
            })
            .collect();
        let mut dw = ndarray::Array2::zeros((co, ckk));
        for p in partials {
            dw += &p;
        }
        let mut db = vec![0.0; co];
        for ni in 0..n {
            for c in 0..co {
                let base = (ni * co + c) * l;
                db[c] += gs[base..base + l].iter().sum::<f64>();
            }
        }
        (
            Some(dw.into_dyn()),
            Some(Arr::from_shape_vec(IxDyn(&[co]), db).unwrap()),
        )
    } else {
        (None, None)
    };
    (dx, dw, db)
}

/// Depthwise convolution forward (weight `(c, 1, kh, kw)`).
fn conv_forward_dw(x: &Arr, wt: &Arr, bias: Option<&Arr>, stride: usize) -> Arr {
    let (n, c, h, w) = dims4(x);
    let ws = sl(wt);
    let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
    let ho = conv_out_size(h, kh, stride);
    let wo = conv_out_size(w, kw, stride);
    let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
    let xs = sl(x);
    let bs = bias.map(sl);
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(chunk, on)| {
            let (ni, ci) = (chunk / c, chunk % c);
            let xn = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let wk = &ws[ci * kh * kw..(ci + 1) * kh * kw];
            let b = bs.map(|b| b[ci]).unwrap_or(0.0);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for ki in 0..kh {
                        let row = (oy * stride + ki) * w + ox * stride;
                        for kj in 0..kw {
                            acc += xn[row + kj] * wk[ki * kw + kj];
                        }
                    }
                    on[oy * wo + ox] = acc;
                }
            }
        });
    out
}

fn conv_backward_dw(
    x: &Arr,
    wt: &Arr,
    g: &Arr,
    stride: usize,
    want_dw: bool,
) -> (Arr, Option<Arr>, Option<Arr>) {
    let (n, c, h, w) = dims4(x);
    let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
    let (_, _, ho, wo) = dims4(g);
    let xs = sl(x);
    let ws = sl(wt);
    let gs = sl(g);

    let mut dx = Arr::zeros(x.raw_dim());
    dx.as_slice_mut()
        .unwrap()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(chunk, dxn)| {
            let (ni, ci) = (chunk / c, chunk % c);
            let gn = &gs[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            let wk = &ws[ci * kh * kw..(ci + 1) * kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gn[oy * wo + ox];
                    for ki in 0..kh {
                        let row = (oy * stride + ki) * w + ox * stride;
                        for kj in 0..kw {
                            dxn[row + kj] += gv * wk[ki * kw + kj];
                        }
                    }
                }
            }
        });

    let (dw, db) = if want_dw {
        let mut dw = Arr::zeros(wt.raw_dim());
        let mut db = vec![0.0; c];
        {
            let dws = dw.as_slice_mut().unwrap();
            // parallel over channels; the batch loop inside stays ordered
            dws.par_chunks_mut(kh * kw)
                .enumerate()
                .for_each(|(ci, dwc)| {
                    for ni in 0..n {
                        let xn = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let gn = &gs[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gn[oy * wo + ox];
                                for ki in 0..kh {
                                    let row = (oy * stride + ki) * w + ox * stride;
                                    for kj in 0..kw {
                                        dwc[ki * kw + kj] += xn[row + kj] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * ho * wo;
                db[ci] += gs[base..base + ho * wo].iter().sum::<f64>();
            }
        }
        (Some(dw), Some(Arr::from_shape_vec(IxDyn(&[c]), db).unwrap()))
    } else {
        (None, None)
    };
    (dx, dw, db)
}

/// Valid (no padding) 2-d convolution. `groups` must be 1 (dense) or equal to
/// the channel count (depthwise, with `weight` shaped `(c, 1, kh, kw)`).
/// Pad explicitly with [`pad2d`] for "same" behavior.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    groups: usize,
) -> Var<'t> {
    let tape = x.tape;
    let (value, dw_grouped) = {
        let xv = tape.value(x);
        let wv = tape.value(weight);
        let bv = bias.map(|b| tape.value(b));
        let (_, ci, _, _) = dims4(&xv);
        let grouped = match groups {
            1 => false,
            g if g == ci => {
                assert_eq!(wv.shape()[0], ci, "depthwise weight channel mismatch");
                assert_eq!(wv.shape()[1], 1, "depthwise weight must be (c,1,kh,kw)");
                true
            }
            g => panic!("unsupported group count {g} for {ci} channels"),
        };
        let value = if grouped {
            conv_forward_dw(&xv, &wv, bv.as_ref(), stride)
        } else {
            assert_eq!(wv.shape()[1], ci, "weight input-channel mismatch");
            let co = wv.shape()[0];
            let ckk = wv.len() / co;
            let wmat = ArrayView2::from_shape((co, ckk), sl(&wv)).unwrap();
            conv_forward_dense(&xv, &wmat, bv.as_ref(), stride, wv.shape()[2], wv.shape()[3])
        };
        (value, grouped)
    };
    let mut parents = vec![x.id, weight.id];
    if let Some(b) = bias {
        parents.push(b.id);
    }
    let has_bias = bias.is_some();
    tape.push(
        value,
        parents,
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let wv = ctx.p(1);
            let (dx, dw, db) = if dw_grouped {
                conv_backward_dw(xv, wv, ctx.grad, stride, true)
            } else {
                let co = wv.shape()[0];
                let ckk = wv.len() / co;
                let wmat = ArrayView2::from_shape((co, ckk), sl(wv)).unwrap();
                let (dx, dw, db) = conv_backward_dense(
                    xv,
                    &wmat,
                    ctx.grad,
                    stride,
                    wv.shape()[2],
                    wv.shape()[3],
                    true,
                );
                (
                    dx,
                    dw.map(|d| d.to_shape(wv.raw_dim()).unwrap().to_owned()),
                    db,
                )
            };
            let mut out = vec![dx, dw.unwrap()];
            if has_bias {
                out.push(db.unwrap());
            }
            out
        })),
    )
}

/// Convolution with a constant (non-learned) kernel; gradients flow only to
/// the input. Used for the fixed Laplacian and the frozen feature extractor.
pub fn conv2d_fixed<'t>(x: Var<'t>, kernel: Arr, stride: usize, groups: usize) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (_, ci, _, _) = dims4(&xv);
        match groups {
            1 => {
                let co = kernel.shape()[0];
                let ckk = kernel.len() / co;
                let wmat = ArrayView2::from_shape((co, ckk), sl(&kernel)).unwrap();
                conv_forward_dense(&xv, &wmat, None, stride, kernel.shape()[2], kernel.shape()[3])
            }
            g if g == ci => conv_forward_dw(&xv, &kernel, None, stride),
            g => panic!("unsupported group count {g}"),
        }
    };
    let grouped = groups != 1;
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let dx = if grouped {
                conv_backward_dw(xv, &kernel, ctx.grad, stride, false).0
            } else {
                let co = kernel.shape()[0];
                let ckk = kernel.len() / co;
                let wmat = ArrayView2::from_shape((co, ckk), sl(&kernel)).unwrap();
                conv_backward_dense(
                    xv,
                    &wmat,
                    ctx.grad,
                    stride,
                    kernel.shape()[2],
                    kernel.shape()[3],
                    false,
                )
                .0
            };
            vec![dx]
        })),
    )
}

/// Depthwise transposed convolution with kernel == stride: every input pixel
/// expands into a `k x k` tile, tiles do not overlap. Weight is `(c, k, k)`.
pub fn conv_transpose_dw<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, k: usize) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let wv = tape.value(weight);
        let bv = bias.map(|b| tape.value(b));
        let (n, c, h, w) = dims4(&xv);
        assert_eq!(wv.shape(), [c, k, k], "expansion weight must be (c,k,k)");
        let xs = sl(&xv);
        let ws = sl(&wv);
        let bs = bv.as_ref().map(|b| sl(b).to_vec());
        let mut out = Arr::zeros(IxDyn(&[n, c, h * k, w * k]));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(h * k * w * k)
            .enumerate()
            .for_each(|(chunk, on)| {
                let (ni, ci) = (chunk / c, chunk % c);
                let xn = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let wk = &ws[ci * k * k..(ci + 1) * k * k];
                let b = bs.as_ref().map(|b| b[ci]).unwrap_or(0.0);
                let wo = w * k;
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xn[iy * w + ix];
                        for di in 0..k {
                            let dst = (iy * k + di) * wo + ix * k;
                            for dj in 0..k {
                                on[dst + dj] = v * wk[di * k + dj] + b;
                            }
                        }
                    }
                }
            });
        out
    };
    let mut parents = vec![x.id, weight.id];
    if let Some(b) = bias {
        parents.push(b.id);
    }
    let has_bias = bias.is_some();
    tape.push(
        value,
        parents,
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let wv = ctx.p(1);
            let (n, c, h, w) = dims4(xv);
            let xs = sl(xv);
            let ws = sl(wv);
            let gs = sl(ctx.grad);
            let wo = w * k;
            let mut dx = Arr::zeros(xv.raw_dim());
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(chunk, dxn)| {
                    let (ni, ci) = (chunk / c, chunk % c);
                    let gn = &gs[(ni * c + ci) * h * k * wo..(ni * c + ci + 1) * h * k * wo];
                    let wk = &ws[ci * k * k..(ci + 1) * k * k];
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut acc = 0.0;
                            for di in 0..k {
                                let src = (iy * k + di) * wo + ix * k;
                                for dj in 0..k {
                                    acc += gn[src + dj] * wk[di * k + dj];
                                }
                            }
                            dxn[iy * w + ix] = acc;
                        }
                    }
                });
            let mut dw = Arr::zeros(wv.raw_dim());
            dw.as_slice_mut()
                .unwrap()
                .par_chunks_mut(k * k)
                .enumerate()
                .for_each(|(ci, dwc)| {
                    for ni in 0..n {
                        let xn = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let gn =
                            &gs[(ni * c + ci) * h * k * wo..(ni * c + ci + 1) * h * k * wo];
                        for iy in 0..h {
                            for ix in 0..w {
                                let v = xn[iy * w + ix];
                                for di in 0..k {
                                    let src = (iy * k + di) * wo + ix * k;
                                    for dj in 0..k {
                                        dwc[di * k + dj] += v * gn[src + dj];
                                    }
                                }
                            }
                        }
                    }
                });
            let mut out = vec![dx, dw];
            if has_bias {
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * k * wo;
                        db[ci] += gs[base..base + h * k * wo].iter().sum::<f64>();
                    }
                }
                out.push(Arr::from_shape_vec(IxDyn(&[c]), db).unwrap());
            }
            out
        })),
    )
}

fn reflect_idx(i: isize, len: usize) -> usize {
    crate::laplace::reflect(i, len)
}

/// Pads the two spatial axes of an `(n, c, h, w)` tensor.
pub fn pad2d<'t>(x: Var<'t>, pad: usize, mode: PadMode) -> Var<'t> {
    if pad == 0 {
        return x;
    }
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert!(
            mode == PadMode::Zero || (h > pad && w > pad),
            "reflect pad {pad} needs sides > pad, got {h}x{w}"
        );
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(ho * wo)
            .enumerate()
            .for_each(|(chunk, on)| {
                let xn = &xs[chunk * h * w..(chunk + 1) * h * w];
                match mode {
                    PadMode::Zero => {
                        for y in 0..h {
                            let dst = (y + pad) * wo + pad;
                            on[dst..dst + w].copy_from_slice(&xn[y * w..(y + 1) * w]);
                        }
                    }
                    PadMode::Reflect => {
                        for oy in 0..ho {
                            let sy = reflect_idx(oy as isize - pad as isize, h);
                            for ox in 0..wo {
                                let sx = reflect_idx(ox as isize - pad as isize, w);
                                on[oy * wo + ox] = xn[sy * w + sx];
                            }
                        }
                    }
                }
            });
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (_, c, h, w) = dims4(xv);
            let (ho, wo) = (h + 2 * pad, w + 2 * pad);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(chunk, dxn)| {
                    let gn = &gs[chunk * ho * wo..(chunk + 1) * ho * wo];
                    match mode {
                        PadMode::Zero => {
                            for y in 0..h {
                                let src = (y + pad) * wo + pad;
                                for x_ in 0..w {
                                    dxn[y * w + x_] += gn[src + x_];
                                }
                            }
                        }
                        PadMode::Reflect => {
                            for oy in 0..ho {
                                let sy = reflect_idx(oy as isize - pad as isize, h);
                                for ox in 0..wo {
                                    let sx = reflect_idx(ox as isize - pad as isize, w);
                                    dxn[sy * w + sx] += gn[oy * wo + ox];
                                }
                            }
                        }
                    }
                    let _ = c;
                });
            vec![dx]
        })),
    )
}

/// Pads only the bottom and right spatial edges — used to round feature maps
/// up to a stride multiple without shifting their origin.
pub fn pad2d_rb<'t>(x: Var<'t>, pad_b: usize, pad_r: usize, mode: PadMode) -> Var<'t> {
    if pad_b == 0 && pad_r == 0 {
        return x;
    }
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert!(
            mode == PadMode::Zero || (h > pad_b && w > pad_r),
            "reflect pad ({pad_b},{pad_r}) needs sides larger, got {h}x{w}"
        );
        let (ho, wo) = (h + pad_b, w + pad_r);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(ho * wo)
            .enumerate()
            .for_each(|(chunk, on)| {
                let xn = &xs[chunk * h * w..(chunk + 1) * h * w];
                for oy in 0..ho {
                    let sy = match mode {
                        PadMode::Zero if oy >= h => continue,
                        PadMode::Zero => oy,
                        PadMode::Reflect => reflect_idx(oy as isize, h),
                    };
                    for ox in 0..wo {
                        let sx = match mode {
                            PadMode::Zero if ox >= w => continue,
                            PadMode::Zero => ox,
                            PadMode::Reflect => reflect_idx(ox as isize, w),
                        };
                        on[oy * wo + ox] = xn[sy * w + sx];
                    }
                }
            });
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (_, _, h, w) = dims4(xv);
            let (ho, wo) = (h + pad_b, w + pad_r);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(chunk, dxn)| {
                    let gn = &gs[chunk * ho * wo..(chunk + 1) * ho * wo];
                    for oy in 0..ho {
                        let sy = match mode {
                            PadMode::Zero if oy >= h => continue,
                            PadMode::Zero => oy,
                            PadMode::Reflect => reflect_idx(oy as isize, h),
                        };
                        for ox in 0..wo {
                            let sx = match mode {
                                PadMode::Zero if ox >= w => continue,
                                PadMode::Zero => ox,
                                PadMode::Reflect => reflect_idx(ox as isize, w),
                            };
                            dxn[sy * w + sx] += gn[oy * wo + ox];
                        }
                    }
                });
            vec![dx]
        })),
    )
}

/// Takes `len` contiguous channels starting at `start` from `(n, c, h, w)`.
pub fn slice_channels<'t>(x: Var<'t>, start: usize, len: usize) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert!(start + len <= c, "channel slice {start}+{len} exceeds {c}");
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, len, h, w]));
        out.as_slice_mut()
            .unwrap()
            .chunks_mut(len * h * w)
            .enumerate()
            .for_each(|(ni, on)| {
                let base = (ni * c + start) * h * w;
                on.copy_from_slice(&xs[base..base + len * h * w]);
            });
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (n, c, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            {
                let ds = dx.as_slice_mut().unwrap();
                for ni in 0..n {
                    let base = (ni * c + start) * h * w;
                    let gbase = ni * len * h * w;
                    ds[base..base + len * h * w]
                        .copy_from_slice(&gs[gbase..gbase + len * h * w]);
                }
            }
            vec![dx]
        })),
    )
}

/// Crops a `(h, w)` window starting at `(top, left)` from the spatial axes.
pub fn crop2d<'t>(x: Var<'t>, top: usize, left: usize, h: usize, w: usize) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, hi, wi) = dims4(&xv);
        assert!(top + h <= hi && left + w <= wi, "crop out of bounds");
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        out.as_slice_mut()
            .unwrap()
            .chunks_mut(h * w)
            .enumerate()
            .for_each(|(chunk, on)| {
                let xn = &xs[chunk * hi * wi..(chunk + 1) * hi * wi];
                for y in 0..h {
                    let src = (y + top) * wi + left;
                    on[y * w..(y + 1) * w].copy_from_slice(&xn[src..src + w]);
                }
            });
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (_, _, hi, wi) = dims4(xv);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            dx.as_slice_mut()
                .unwrap()
                .chunks_mut(hi * wi)
                .enumerate()
                .for_each(|(chunk, dxn)| {
                    let gn = &gs[chunk * h * w..(chunk + 1) * h * w];
                    for y in 0..h {
                        let dst = (y + top) * wi + left;
                        for x_ in 0..w {
                            dxn[dst + x_] += gn[y * w + x_];
                        }
                    }
                });
            vec![dx]
        })),
    )
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn nearest_up2(x: Var) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(4 * h * w)
            .enumerate()
            .for_each(|(chunk, on)| {
                let xn = &xs[chunk * h * w..(chunk + 1) * h * w];
                let wo = 2 * w;
                for y in 0..h {
                    for x_ in 0..w {
                        let v = xn[y * w + x_];
                        let dst = 2 * y * wo + 2 * x_;
                        on[dst] = v;
                        on[dst + 1] = v;
                        on[dst + wo] = v;
                        on[dst + wo + 1] = v;
                    }
                }
            });
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (_, _, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(chunk, dxn)| {
                    let gn = &gs[chunk * 4 * h * w..(chunk + 1) * 4 * h * w];
                    let wo = 2 * w;
                    for y in 0..h {
                        for x_ in 0..w {
                            let src = 2 * y * wo + 2 * x_;
                            dxn[y * w + x_] =
                                gn[src] + gn[src + 1] + gn[src + wo] + gn[src + wo + 1];
                        }
                    }
                });
            vec![dx]
        })),
    )
}

/// Global average pooling `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(x: Var) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c]));
        let os = out.as_slice_mut().unwrap();
        for i in 0..n * c {
            os[i] = xs[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (n, c, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let inv = 1.0 / (h * w) as f64;
            let mut dx = Arr::zeros(xv.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for i in 0..n * c {
                let gv = gs[i] * inv;
                for v in &mut ds[i * h * w..(i + 1) * h * w] {
                    *v = gv;
                }
            }
            vec![dx]
        })),
    )
}

fn bin_bounds(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1).min(len.max(1)))
}

/// Adaptive average pooling to a `(gh, gw)` grid, PyTorch bin conventions.
pub fn adaptive_avg_pool(x: Var, gh: usize, gw: usize) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, c, gh, gw]));
        let os = out.as_slice_mut().unwrap();
        for i in 0..n * c {
            let xn = &xs[i * h * w..(i + 1) * h * w];
            for by in 0..gh {
                let (y0, y1) = bin_bounds(by, h, gh);
                for bx in 0..gw {
                    let (x0, x1) = bin_bounds(bx, w, gw);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x_ in x0..x1 {
                            acc += xn[y * w + x_];
                        }
                    }
                    os[(i * gh + by) * gw + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (n, c, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for i in 0..n * c {
                let dn = &mut ds[i * h * w..(i + 1) * h * w];
                for by in 0..gh {
                    let (y0, y1) = bin_bounds(by, h, gh);
                    for bx in 0..gw {
                        let (x0, x1) = bin_bounds(bx, w, gw);
                        let gv = gs[(i * gh + by) * gw + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for x_ in x0..x1 {
                                dn[y * w + x_] += gv;
                            }
                        }
                    }
                }
            }
            vec![dx]
        })),
    )
}

/// Mean over the channel axis: `(n, c, h, w) -> (n, 1, h, w)`.
pub fn channel_avg(x: Var) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, 1, h, w]));
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for p in 0..h * w {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += xs[(ni * c + ci) * h * w + p];
                }
                os[ni * h * w + p] = acc / c as f64;
            }
        }
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (n, c, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let inv = 1.0 / c as f64;
            let mut dx = Arr::zeros(xv.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    for p in 0..h * w {
                        ds[(ni * c + ci) * h * w + p] = gs[ni * h * w + p] * inv;
                    }
                }
            }
            vec![dx]
        })),
    )
}

/// Max over the channel axis, lowest index on ties: `(n,c,h,w) -> (n,1,h,w)`.
pub fn channel_max(x: Var) -> Var {
    let tape = x.tape;
    let (value, argmax) = {
        let xv = tape.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = sl(&xv);
        let mut out = Arr::zeros(IxDyn(&[n, 1, h, w]));
        let mut arg = vec![0u32; n * h * w];
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for p in 0..h * w {
                let mut best = xs[ni * c * h * w + p];
                let mut bi = 0u32;
                for ci in 1..c {
                    let v = xs[(ni * c + ci) * h * w + p];
                    if v > best {
                        best = v;
                        bi = ci as u32;
                    }
                }
                os[ni * h * w + p] = best;
                arg[ni * h * w + p] = bi;
            }
        }
        (out, arg)
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let (n, c, h, w) = dims4(xv);
            let gs = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                for p in 0..h * w {
                    let ci = argmax[ni * h * w + p] as usize;
                    ds[(ni * c + ci) * h * w + p] = gs[ni * h * w + p];
                }
            }
            let _ = c;
            vec![dx]
        })),
    )
}

/// 1-d convolution across the channel axis of pooled vectors `(n, c)`, zero
/// padded to keep the size; `weight` is a `(k)` vector with odd `k`, no bias.
pub fn conv1d_channels<'t>(p: Var<'t>, weight: Var<'t>) -> Var<'t> {
    let tape = p.tape;
    let value = {
        let pv = tape.value(p);
        let wv = tape.value(weight);
        let k = wv.len();
        assert!(k % 2 == 1, "channel conv kernel must be odd, got {k}");
        let off = k / 2;
        let s = pv.shape();
        let (n, c) = (s[0], s[1]);
        let ps = sl(&pv);
        let ws = sl(&wv);
        let mut out = Arr::zeros(IxDyn(&[n, c]));
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let idx = ci as isize + j as isize - off as isize;
                    if idx >= 0 && (idx as usize) < c {
                        acc += ps[ni * c + idx as usize] * ws[j];
                    }
                }
                os[ni * c + ci] = acc;
            }
        }
        out
    };
    tape.push(
        value,
        vec![p.id, weight.id],
        Some(Box::new(|ctx: &BackCtx| {
            let pv = ctx.p(0);
            let wv = ctx.p(1);
            let k = wv.len();
            let off = k / 2;
            let s = pv.shape();
            let (n, c) = (s[0], s[1]);
            let ps = sl(pv);
            let ws = sl(wv);
            let gs = sl(ctx.grad);
            let mut dp = Arr::zeros(pv.raw_dim());
            let mut dw = Arr::zeros(wv.raw_dim());
            {
                let dps = dp.as_slice_mut().unwrap();
                let dws = dw.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = gs[ni * c + ci];
                        for j in 0..k {
                            let idx = ci as isize + j as isize - off as isize;
                            if idx >= 0 && (idx as usize) < c {
                                dps[ni * c + idx as usize] += ws[j] * gv;
                                dws[j] += ps[ni * c + idx as usize] * gv;
                            }
                        }
                    }
                }
            }
            vec![dp, dw]
        })),
    )
}

/// Row lookup `codebook[(k, d)] x indices -> (len, d)`; backward scatters into
/// the codebook in index order.
pub fn gather_rows<'t>(codebook: Var<'t>, indices: Vec<u32>) -> Var<'t> {
    let tape = codebook.tape;
    let value = {
        let cb = tape.value(codebook);
        let s = cb.shape();
        let (k, d) = (s[0], s[1]);
        let cs = sl(&cb);
        let mut out = Arr::zeros(IxDyn(&[indices.len(), d]));
        let os = out.as_slice_mut().unwrap();
        for (l, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            assert!(idx < k, "codebook index {idx} out of range {k}");
            os[l * d..(l + 1) * d].copy_from_slice(&cs[idx * d..(idx + 1) * d]);
        }
        out
    };
    tape.push(
        value,
        vec![codebook.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let cb = ctx.p(0);
            let d = cb.shape()[1];
            let gs = sl(ctx.grad);
            let mut dcb = Arr::zeros(cb.raw_dim());
            let ds = dcb.as_slice_mut().unwrap();
            for (l, &idx) in indices.iter().enumerate() {
                let idx = idx as usize;
                for j in 0..d {
                    ds[idx * d + j] += gs[l * d + j];
                }
            }
            vec![dcb]
        })),
    )
}

/// Straight-through copy: the forward value is `picked` (bit-exact), the
/// whole incoming gradient is routed to `z_e` unchanged.
pub fn straight_through<'t>(z_e: Var<'t>, picked: Arr) -> Var<'t> {
    let tape = z_e.tape;
    assert_eq!(
        tape.shape(z_e),
        picked.shape(),
        "straight-through shape mismatch"
    );
    tape.push(
        picked,
        vec![z_e.id],
        Some(Box::new(|ctx: &BackCtx| vec![ctx.grad.clone()])),
    )
}

/// Layout change `(n, h, w, c) -> (n, c, h, w)`.
pub fn nhwc_to_nchw(x: Var) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        assert_eq!(xv.ndim(), 4);
        xv.permuted_axes(IxDyn(&[0, 3, 1, 2]))
            .as_standard_layout()
            .to_owned()
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|ctx: &BackCtx| {
            vec![ctx
                .grad
                .view()
                .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                .as_standard_layout()
                .to_owned()]
        })),
    )
}

/// Multiplies every channel of `x` `(n, c, h, w)` by the single-channel
/// spatial map `gate` `(n, 1, h, w)`.
pub fn mul_spatial_gate<'t>(x: Var<'t>, gate: Var<'t>) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let gv = tape.value(gate);
        let (n, c, h, w) = dims4(&xv);
        assert_eq!(gv.shape(), [n, 1, h, w], "gate must be (n, 1, h, w)");
        let xs = sl(&xv);
        let gs = sl(&gv);
        let mut out = xv.clone();
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            let gn = &gs[ni * h * w..(ni + 1) * h * w];
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    os[base + p] *= gn[p];
                }
            }
        }
        let _ = xs;
        out
    };
    tape.push(
        value,
        vec![x.id, gate.id],
        Some(Box::new(|ctx: &BackCtx| {
            let xv = ctx.p(0);
            let gv = ctx.p(1);
            let (n, c, h, w) = dims4(xv);
            let xs = sl(xv);
            let gs = sl(gv);
            let grad = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            let mut dg = Arr::zeros(gv.raw_dim());
            {
                let dxs = dx.as_slice_mut().unwrap();
                let dgs = dg.as_slice_mut().unwrap();
                for ni in 0..n {
                    let gn = &gs[ni * h * w..(ni + 1) * h * w];
                    let dgn = &mut dgs[ni * h * w..(ni + 1) * h * w];
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            dxs[base + p] = grad[base + p] * gn[p];
                            dgn[p] += grad[base + p] * xs[base + p];
                        }
                    }
                }
            }
            vec![dx, dg]
        })),
    )
}
