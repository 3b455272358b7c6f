//! Shared helpers for the integration suites: a finite-difference harness
//! that checks every parameter and input of a block, a from-scratch dense
//! loop implementation of the mask-query attention used as an independent
//! oracle, and small seeded dataset builders.

#![allow(dead_code)]

use lmq::config::Config;
use lmq::gradcheck::{compare, CheckResult, DEFAULT_STEP};
use lmq::params::{Fwd, ParamStore, StateStore};
use lmq::synth::{make_dataset, DatasetParams, Manifest, SnowMaskSpec};
use lmq::tape::{Arr, Tape, Var};
use ndarray::{Array1, Array3, Array4, IxDyn};
use std::path::Path;

/// Runs `run` to a scalar `mean(out^2)` loss and compares the tape's
/// gradients for every listed input and every parameter in the store
/// against central finite differences. Batch statistics are recomputed
/// from a fresh state clone on every evaluation, so train-mode blocks are
/// pure functions of (inputs, parameters).
pub fn fd_check_block<B>(
    block: &B,
    ps: &ParamStore,
    st: &StateStore,
    xs: &[Arr],
    run: for<'t, 's> fn(&B, &Fwd<'t, 's>, &[Var<'t>]) -> Var<'t>,
) -> Vec<CheckResult> {
    let mut names: Vec<String> = (0..xs.len()).map(|i| format!("input{i}")).collect();
    let mut arrays: Vec<Arr> = xs.to_vec();
    for (name, value) in ps.iter() {
        names.push(name.to_string());
        arrays.push(value.clone());
    }

    let analytic: Vec<Arr> = {
        let tape = Tape::new();
        let mut st2 = st.clone();
        let fw = Fwd::train(&tape, ps, &mut st2);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = run(block, &fw, &vars);
        let loss = out.square().mean_all();
        let mut grads = tape.backward(loss);
        let mut gs: Vec<Arr> = vars
            .iter()
            .zip(xs.iter())
            .map(|(v, x)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Arr::zeros(x.raw_dim()))
            })
            .collect();
        for (g, (_, p)) in fw.param_grads(&mut grads).into_iter().zip(ps.iter()) {
            gs.push(g.unwrap_or_else(|| Arr::zeros(p.raw_dim())));
        }
        gs
    };

    let n_inputs = xs.len();
    let param_names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    let f = |arrs: &[Arr]| -> f64 {
        let mut ps2 = ps.clone();
        for (i, name) in param_names.iter().enumerate() {
            let id = ps2.id_of(name).unwrap();
            *ps2.get_mut(id) = arrs[n_inputs + i].clone();
        }
        let tape = Tape::new();
        let mut st2 = st.clone();
        let fw = Fwd::train(&tape, &ps2, &mut st2);
        let vars: Vec<Var> = arrs[..n_inputs].iter().map(|x| tape.leaf(x.clone())).collect();
        run(block, &fw, &vars).square().mean_all().scalar()
    };

    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    compare(&name_refs, &analytic, f, &arrays, DEFAULT_STEP)
}

// ---- dense attention reference ----------------------------------------------

fn get<'a>(ps: &'a ParamStore, name: &str) -> &'a Arr {
    ps.get(ps.id_of(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn as4(a: &Arr) -> Array4<f64> {
    a.clone().into_dimensionality().unwrap()
}

fn as3(a: &Arr) -> Array3<f64> {
    a.clone().into_dimensionality().unwrap()
}

fn as1(a: &Arr) -> Array1<f64> {
    a.clone().into_dimensionality().unwrap()
}

/// Valid depthwise convolution with stride = kernel (non-overlapping tiles).
fn dw_tile_conv(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>, k: usize) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (hr, wr) = (h / k, wd / k);
    let mut out = Array4::zeros((n, c, hr, wr));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..hr {
                for ox in 0..wr {
                    let mut acc = b[ci];
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x[[ni, ci, oy * k + dy, ox * k + dx]] * w[[ci, 0, dy, dx]];
                        }
                    }
                    out[[ni, ci, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

fn conv1x1(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
    let (n, ci, h, wd) = x.dim();
    let co = w.dim().0;
    let mut out = Array4::zeros((n, co, h, wd));
    for ni in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xc in 0..wd {
                    let mut acc = b[o];
                    for i in 0..ci {
                        acc += x[[ni, i, y, xc]] * w[[o, i, 0, 0]];
                    }
                    out[[ni, o, y, xc]] = acc;
                }
            }
        }
    }
    out
}

fn pool_bins(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1).min(len.max(1)))
}

fn adaptive_pool(x: &Array4<f64>, gh: usize, gw: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, gh, gw));
    for ni in 0..n {
        for ci in 0..c {
            for by in 0..gh {
                let (y0, y1) = pool_bins(by, h, gh);
                for bx in 0..gw {
                    let (x0, x1) = pool_bins(bx, w, gw);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xc in x0..x1 {
                            acc += x[[ni, ci, y, xc]];
                        }
                    }
                    out[[ni, ci, by, bx]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    out
}

fn softmax_rows(m: &mut [f64]) {
    let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in m.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in m.iter_mut() {
        *v /= sum;
    }
}

/// Largest-divisor query grid, mirroring the production factorization.
pub fn grid_of(n_q: usize) -> (usize, usize) {
    let mut gh = (n_q as f64).sqrt().floor() as usize;
    while n_q % gh != 0 {
        gh -= 1;
    }
    (gh, n_q / gh)
}

/// Everything the attention block does, written as plain nested loops over
/// raw arrays: tile-reduce, project, pool queries, score, two softmax
/// normalizations, redistribute, and expand. No tape code is involved.
pub fn dmqa_dense_reference(
    x: &Array4<f64>,
    mask: Option<&Array4<f64>>,
    ps: &ParamStore,
    name: &str,
    n_q: usize,
    k: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h % k == 0 && w % k == 0);
    let (hr, wr) = (h / k, w / k);
    let tokens = hr * wr;

    let rx = dw_tile_conv(
        x,
        &as4(get(ps, &format!("{name}.rd_x.w"))),
        &as1(get(ps, &format!("{name}.rd_x.b"))),
        k,
    );
    let kv = conv1x1(
        &rx,
        &as4(get(ps, &format!("{name}.kv.w"))),
        &as1(get(ps, &format!("{name}.kv.b"))),
    );
    let q_in = match mask {
        Some(m) => {
            let rm = dw_tile_conv(
                m,
                &as4(get(ps, &format!("{name}.rd_m.w"))),
                &as1(get(ps, &format!("{name}.rd_m.b"))),
                k,
            );
            &rx + &rm
        }
        None => rx.clone(),
    };
    let q_map = conv1x1(
        &q_in,
        &as4(get(ps, &format!("{name}.q.w"))),
        &as1(get(ps, &format!("{name}.q.b"))),
    );

    // query token list (per image): nq rows of c values
    let (nq, q_rows): (usize, Vec<Array3<f64>>) = if n_q == 0 {
        let mut rows = Vec::new();
        for ni in 0..n {
            let mut t = Array3::zeros((1, tokens, c));
            for ci in 0..c {
                for ti in 0..tokens {
                    t[[0, ti, ci]] = q_map[[ni, ci, ti / wr, ti % wr]];
                }
            }
            rows.push(t);
        }
        (tokens, rows)
    } else {
        let (gh, gw) = grid_of(n_q);
        let pooled = adaptive_pool(&q_map, gh, gw);
        let mut rows = Vec::new();
        for ni in 0..n {
            let mut t = Array3::zeros((1, gh * gw, c));
            for ci in 0..c {
                for ti in 0..gh * gw {
                    t[[0, ti, ci]] = pooled[[ni, ci, ti / gw, ti % gw]];
                }
            }
            rows.push(t);
        }
        (gh * gw, rows)
    };

    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Array4::zeros((n, c, h, w));
    let ep_w = as3(get(ps, &format!("{name}.ep.w")));
    let ep_b = as1(get(ps, &format!("{name}.ep.b")));
    for ni in 0..n {
        // scores (nq, tokens)
        let mut scores = vec![0.0; nq * tokens];
        for qi in 0..nq {
            for ti in 0..tokens {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += q_rows[ni][[0, qi, ci]] * kv[[ni, ci, ti / wr, ti % wr]];
                }
                scores[qi * tokens + ti] = acc * scale;
            }
        }
        // attention: softmax over tokens, one row per query
        let mut attn = scores.clone();
        for qi in 0..nq {
            softmax_rows(&mut attn[qi * tokens..(qi + 1) * tokens]);
        }
        // summaries (nq, c) over the value half of the projection
        let mut summaries = vec![0.0; nq * c];
        for qi in 0..nq {
            for ci in 0..c {
                let mut acc = 0.0;
                for ti in 0..tokens {
                    acc += attn[qi * tokens + ti] * kv[[ni, c + ci, ti / wr, ti % wr]];
                }
                summaries[qi * c + ci] = acc;
            }
        }
        // redistribution: softmax over queries, one column per token
        let mut redis = scores;
        for ti in 0..tokens {
            let mut col: Vec<f64> = (0..nq).map(|qi| redis[qi * tokens + ti]).collect();
            softmax_rows(&mut col);
            for qi in 0..nq {
                redis[qi * tokens + ti] = col[qi];
            }
        }
        // field (c, hr, wr): convex mix of summaries per token, then expand
        for ci in 0..c {
            for ti in 0..tokens {
                let mut acc = 0.0;
                for qi in 0..nq {
                    acc += redis[qi * tokens + ti] * summaries[qi * c + ci];
                }
                let (fy, fx) = (ti / wr, ti % wr);
                for dy in 0..k {
                    for dx in 0..k {
                        out[[ni, ci, fy * k + dy, fx * k + dx]] =
                            acc * ep_w[[ci, dy, dx]] + ep_b[ci];
                    }
                }
            }
        }
    }
    out
}

// ---- seeded data builders ---------------------------------------------------

pub fn quiet_spec(seed: u64) -> SnowMaskSpec {
    SnowMaskSpec {
        flake_density: 0.8,
        streak_count_range: (1, 3),
        seed,
        ..SnowMaskSpec::default()
    }
}

/// Writes a small all-train dataset and returns its manifest.
pub fn tiny_dataset(dir: &Path, n: usize, side: usize, seed: u64) -> Manifest {
    let params = DatasetParams {
        n_samples: n,
        split_fractions: (1.0, 0.0, 0.0),
        height: side,
        width: side,
    };
    make_dataset(None, dir, &quiet_spec(seed), &params).unwrap().train
}

/// A configuration small enough for single-second training steps.
pub fn tiny_config(crop: usize) -> Config {
    let mut cfg = Config::defaults();
    cfg.apply_text(&format!(
        "vqvae.base_channels=4\nvqvae.codebook_size=16\n\
         mq.channels=4,6,8\nmq.blocks=1,1,1\nmq.n_queries=2\n\
         train.batch_size=2\ntrain.crop={crop}\n\
         train.stage1_epochs=2\ntrain.stage2_epochs=2\n\
         eval.crop={crop}\n"
    ))
    .unwrap();
    cfg
}

pub fn seeded_arr(shape: &[usize], seed: u64) -> Arr {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}
