//! Batch normalization, matrix products, axis softmax, channel gating and
//! channel-axis concatenation.

use super::{Arr, BackCtx, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayView2, Axis, Ix2, Ix3, IxDyn};

fn sl(a: &Arr) -> &[f64] {
    a.as_slice().expect("tape arrays are standard layout")
}

/// Where batch-norm statistics come from. Training normalizes by the batch
/// and updates the running buffers as a side effect; evaluation reads the
/// frozen buffers only.
pub enum BnMode<'a> {
    Train {
        running_mean: &'a mut Array1<f64>,
        running_var: &'a mut Array1<f64>,
        momentum: f64,
    },
    Eval {
        running_mean: &'a Array1<f64>,
        running_var: &'a Array1<f64>,
    },
}

/// Per-channel batch normalization over `(n, c, h, w)`.
pub fn batchnorm2d<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mode: BnMode,
    eps: f64,
) -> Var<'t> {
    let tape = x.tape;
    let xv = tape.value(x);
    let s = xv.shape().to_vec();
    assert_eq!(s.len(), 4);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cnt = (n * h * w) as f64;
    let xs = sl(&xv);

    // statistics used for normalization (batch or running)
    let (mean, var, train) = match mode {
        BnMode::Train {
            running_mean,
            running_var,
            momentum,
        } => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    acc += xs[base..base + h * w].iter().sum::<f64>();
                }
                mean[ci] = acc / cnt;
            }
            for ci in 0..c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for &v in &xs[base..base + h * w] {
                        let d = v - mean[ci];
                        acc += d * d;
                    }
                }
                var[ci] = acc / cnt;
            }
            let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
            for ci in 0..c {
                running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mean[ci];
                running_var[ci] =
                    (1.0 - momentum) * running_var[ci] + momentum * var[ci] * unbias;
            }
            (mean, var, true)
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => (
            running_mean.to_vec(),
            running_var.to_vec(),
            false,
        ),
    };

    let value = {
        let gv = tape.value(gamma);
        let bv = tape.value(beta);
        let gs = sl(&gv);
        let bs = sl(&bv);
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    os[base + p] = gs[ci] * (xs[base + p] - mean[ci]) * inv + bs[ci];
                }
            }
        }
        out
    };

    tape.push(
        value,
        vec![x.id, gamma.id, beta.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let xv = ctx.p(0);
            let gv = ctx.p(1);
            let xs = sl(xv);
            let gs = sl(gv);
            let grad = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let ds = dx.as_slice_mut().unwrap();
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        let xh = (xs[base + p] - mean[ci]) * inv;
                        let g = grad[base + p];
                        sum_g += g;
                        sum_gx += g * xh;
                    }
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                if train {
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            let xh = (xs[base + p] - mean[ci]) * inv;
                            let g = grad[base + p];
                            ds[base + p] =
                                gs[ci] * inv * (g - sum_g / cnt - xh * sum_gx / cnt);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            ds[base + p] = grad[base + p] * gs[ci] * inv;
                        }
                    }
                }
            }
            vec![
                dx,
                Arr::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                Arr::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
            ]
        })),
    )
}

/// Plain 2-d matrix product `(m, k) x (k, n)`.
pub fn matmul2<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = a.tape;
    let value = {
        let av = tape.value(a);
        let bv = tape.value(b);
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        a2.dot(&b2).into_dyn()
    };
    tape.push(
        value,
        vec![a.id, b.id],
        Some(Box::new(|ctx: &BackCtx| {
            let a2 = ctx.p(0).view().into_dimensionality::<Ix2>().unwrap();
            let b2 = ctx.p(1).view().into_dimensionality::<Ix2>().unwrap();
            let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
        })),
    )
}

/// Batched matrix product `(B, r, k) x (B, k, n) -> (B, r, n)`.
pub fn bmm<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = a.tape;
    let value = {
        let av = tape.value(a);
        let bv = tape.value(b);
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
        let (bsz, r, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let asl = sl(&av);
        let bsl = sl(&bv);
        let mut out = Arr::zeros(IxDyn(&[bsz, r, n]));
        {
            let os = out.as_slice_mut().unwrap();
            for i in 0..bsz {
                let a2 = ArrayView2::from_shape((r, k), &asl[i * r * k..(i + 1) * r * k]).unwrap();
                let b2 = ArrayView2::from_shape((k, n), &bsl[i * k * n..(i + 1) * k * n]).unwrap();
                let mut o2 = ndarray::ArrayViewMut2::from_shape(
                    (r, n),
                    &mut os[i * r * n..(i + 1) * r * n],
                )
                .unwrap();
                general_mat_mul(1.0, &a2, &b2, 0.0, &mut o2);
            }
        }
        out
    };
    tape.push(
        value,
        vec![a.id, b.id],
        Some(Box::new(|ctx: &BackCtx| {
            let av = ctx.p(0);
            let bv = ctx.p(1);
            let (sa, sb) = (av.shape(), bv.shape());
            let (bsz, r, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let asl = sl(av);
            let bsl = sl(bv);
            let gsl = sl(ctx.grad);
            let mut da = Arr::zeros(av.raw_dim());
            let mut db = Arr::zeros(bv.raw_dim());
            {
                let das = da.as_slice_mut().unwrap();
                let dbs = db.as_slice_mut().unwrap();
                for i in 0..bsz {
                    let a2 =
                        ArrayView2::from_shape((r, k), &asl[i * r * k..(i + 1) * r * k]).unwrap();
                    let b2 =
                        ArrayView2::from_shape((k, n), &bsl[i * k * n..(i + 1) * k * n]).unwrap();
                    let g2 =
                        ArrayView2::from_shape((r, n), &gsl[i * r * n..(i + 1) * r * n]).unwrap();
                    let mut da2 = ndarray::ArrayViewMut2::from_shape(
                        (r, k),
                        &mut das[i * r * k..(i + 1) * r * k],
                    )
                    .unwrap();
                    general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut da2);
                    let mut db2 = ndarray::ArrayViewMut2::from_shape(
                        (k, n),
                        &mut dbs[i * k * n..(i + 1) * k * n],
                    )
                    .unwrap();
                    general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut db2);
                }
            }
            vec![da, db]
        })),
    )
}

/// Swaps the last two axes of a 3-d tensor.
pub fn transpose_last2(a: Var) -> Var {
    let tape = a.tape;
    let value = {
        let av = tape.value(a);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("transpose 3-d");
        a3.permuted_axes([0, 2, 1]).as_standard_layout().to_owned().into_dyn()
    };
    tape.push(
        value,
        vec![a.id],
        Some(Box::new(|ctx: &BackCtx| {
            let g3 = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
            vec![g3
                .permuted_axes([0, 2, 1])
                .as_standard_layout()
                .to_owned()
                .into_dyn()]
        })),
    )
}

/// Softmax along one axis, independently per lane.
pub fn softmax_axis(x: Var, axis: usize) -> Var {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let mut out = xv.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        out
    };
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &BackCtx| {
            let mut dx = ctx.grad.clone();
            let y = ctx.value;
            ndarray::Zip::from(dx.lanes_mut(Axis(axis)))
                .and(y.lanes(Axis(axis)))
                .for_each(|mut g, yl| {
                    let dot: f64 = g.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                    for (gi, yi) in g.iter_mut().zip(yl.iter()) {
                        *gi = yi * (*gi - dot);
                    }
                });
            vec![dx]
        })),
    )
}

/// Multiplies each `(h, w)` plane of `x` by its `(n, c)` gate value.
pub fn mul_channel_gate<'t>(x: Var<'t>, gate: Var<'t>) -> Var<'t> {
    let tape = x.tape;
    let value = {
        let xv = tape.value(x);
        let gv = tape.value(gate);
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(gv.shape(), [n, c], "gate must be (n, c)");
        let xs = sl(&xv);
        let gs = sl(&gv);
        let mut out = xv.clone();
        let os = out.as_slice_mut().unwrap();
        for i in 0..n * c {
            let gvi = gs[i];
            for v in &mut os[i * h * w..(i + 1) * h * w] {
                *v *= gvi;
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
            let s = xv.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let xs = sl(xv);
            let gs = sl(gv);
            let grad = sl(ctx.grad);
            let mut dx = Arr::zeros(xv.raw_dim());
            let mut dg = Arr::zeros(gv.raw_dim());
            {
                let dxs = dx.as_slice_mut().unwrap();
                let dgs = dg.as_slice_mut().unwrap();
                for i in 0..n * c {
                    let gvi = gs[i];
                    let mut acc = 0.0;
                    for p in 0..h * w {
                        let idx = i * h * w + p;
                        dxs[idx] = grad[idx] * gvi;
                        acc += grad[idx] * xs[idx];
                    }
                    dgs[i] = acc;
                }
            }
            vec![dx, dg]
        })),
    )
}

/// Concatenates along the channel axis (axis 1) of `(n, c, h, w)` tensors.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let (value, channel_counts) = {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let (n, h, w) = (shapes[0][0], shapes[0][2], shapes[0][3]);
        for s in &shapes {
            assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat spatial mismatch");
        }
        let counts: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let ctot: usize = counts.iter().sum();
        let mut out = Arr::zeros(IxDyn(&[n, ctot, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            let mut c_off = 0usize;
            for (pi, part) in parts.iter().enumerate() {
                let pv = tape.value(*part);
                let ps = sl(&pv);
                let pc = counts[pi];
                for ni in 0..n {
                    let src = ni * pc * h * w;
                    let dst = (ni * ctot + c_off) * h * w;
                    os[dst..dst + pc * h * w].copy_from_slice(&ps[src..src + pc * h * w]);
                }
                c_off += pc;
            }
        }
        (out, counts)
    };
    let parent_ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        value,
        parent_ids,
        Some(Box::new(move |ctx: &BackCtx| {
            let s = ctx.grad.shape();
            let (n, ctot, h, w) = (s[0], s[1], s[2], s[3]);
            let gs = sl(ctx.grad);
            let mut out = Vec::with_capacity(channel_counts.len());
            let mut c_off = 0usize;
            for &pc in &channel_counts {
                let mut dp = Arr::zeros(IxDyn(&[n, pc, h, w]));
                {
                    let ds = dp.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let src = (ni * ctot + c_off) * h * w;
                        ds[ni * pc * h * w..(ni + 1) * pc * h * w]
                            .copy_from_slice(&gs[src..src + pc * h * w]);
                    }
                }
                out.push(dp);
                c_off += pc;
            }
            out
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::IxDyn;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t.leaf(
            Arr::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap(),
        );
        let y = softmax_axis(x, 1);
        let yv = y.value();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| yv[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_grads() {
        let t = Tape::new();
        let a = t.leaf(Arr::from_shape_vec(IxDyn(&[1, 2]), vec![2.0, 3.0]).unwrap());
        let b = t.leaf(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![5.0, 7.0]).unwrap());
        let y = matmul2(a, b);
        assert_eq!(y.value()[[0, 0]], 31.0);
        let g = t.backward(y.sum_all());
        assert_eq!(g.wrt(a).unwrap()[[0, 1]], 7.0);
        assert_eq!(g.wrt(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let t = Tape::new();
        let x = t.leaf(
            Arr::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let gamma = t.leaf(Arr::from_elem(IxDyn(&[1]), 1.0));
        let beta = t.leaf(Arr::from_elem(IxDyn(&[1]), 0.0));
        let mut rm = Array1::zeros(1);
        let mut rv = Array1::ones(1);
        let y = batchnorm2d(
            x,
            gamma,
            beta,
            BnMode::Train {
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: 0.1,
            },
            1e-5,
        );
        let yv = y.value();
        let mean: f64 = yv.iter().sum::<f64>() / 4.0;
        let var: f64 = yv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // running buffers moved toward the batch statistics
        assert!((rm[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_gradients() {
        let t = Tape::new();
        let a = t.leaf(Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0));
        let b = t.leaf(Arr::from_elem(IxDyn(&[1, 1, 2, 2]), 2.0));
        let y = concat_channels(&[a, b]);
        assert_eq!(y.shape(), vec![1, 3, 2, 2]);
        let loss = (y * y).sum_all();
        let g = t.backward(loss);
        assert_eq!(g.wrt(a).unwrap()[[0, 0, 0, 0]], 2.0);
        assert_eq!(g.wrt(b).unwrap()[[0, 0, 1, 1]], 4.0);
    }

    #[test]
    fn channel_gate_scales_planes() {
        let t = Tape::new();
        let x = t.leaf(Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 3.0));
        let gate = t.leaf(Arr::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, 2.0]).unwrap());
        let y = mul_channel_gate(x, gate);
        assert_eq!(y.value()[[0, 0, 0, 0]], 1.5);
        assert_eq!(y.value()[[0, 1, 0, 0]], 6.0);
        let g = t.backward(y.sum_all());
        // d/dgate = sum of the plane
        assert_eq!(g.wrt(gate).unwrap()[[0, 0]], 12.0);
    }
}
