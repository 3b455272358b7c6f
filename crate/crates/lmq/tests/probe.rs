//! Scratch diagnostics (not part of the suite; deleted before release).

mod common;

use lmq::config::Config;
use lmq::loss::{
    charbonnier_t, edge_loss_t, perceptual_loss_t, restoration_loss_t, FrozenFeatures,
    LossWeights,
};
use lmq::params::{Fwd, ParamStore, StateStore};
use lmq::synth::{gen_sample, make_dataset, procedural_clean};
use lmq::tape::{Arr, Tape};
use lmq::train::{train_stage1, train_stage2, RunBudget, TrainLogger};
use ndarray::{Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tempfile::tempdir;

#[test]
fn probe_identity_loss_components() {
    let mut cfg = Config::defaults();
    cfg.apply_preset("desk").unwrap();
    let spec = cfg.snow_spec(7).unwrap();
    let mut snow_v = Vec::new();
    let mut clean_v = Vec::new();
    for i in 0..4u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(50 + i);
        let clean = procedural_clean(64, 64, &mut rng).unwrap();
        let s = gen_sample(clean, &spec, 90 + i).unwrap();
        snow_v.push(s.snow);
        clean_v.push(s.clean);
    }
    let mut snow = Arr::zeros(IxDyn(&[4, 3, 64, 64]));
    let mut clean = Arr::zeros(IxDyn(&[4, 3, 64, 64]));
    for i in 0..4 {
        snow.index_axis_mut(Axis(0), i).assign(&snow_v[i].data().view());
        clean.index_axis_mut(Axis(0), i).assign(&clean_v[i].data().view());
    }
    let tape = Tape::new();
    let a = tape.leaf(snow);
    let b = tape.leaf(clean);
    let w = LossWeights::default();
    let fx = FrozenFeatures::seeded();
    let ch = charbonnier_t(a, b, w.eps_char).scalar();
    let pe = perceptual_loss_t(a, b, &fx).unwrap().scalar();
    let ed = edge_loss_t(a, b, w.eps_edge).scalar();
    let total = restoration_loss_t(a, b, &w, &fx).unwrap().scalar();
    println!("charbonnier={ch:.6e} perceptual={pe:.6e} edge={ed:.6e} total={total:.6e}");
    println!(
        "weighted: char {ch:.4e} + l1*perc {:.4e} + l2*edge {:.4e}",
        0.1 * pe,
        0.05 * ed
    );
}

#[test]
fn probe_snow_severity_candidates() {
    use lmq::metrics::psnr;
    use lmq::synth::SnowMaskSpec;
    for (label, density, op_min, op_max) in [
        ("current", 1.5, 0.4, 0.95),
        ("d6", 6.0, 0.5, 1.0),
        ("d10", 10.0, 0.55, 1.0),
        ("d14", 14.0, 0.55, 1.0),
    ] {
        let mut cov = 0.0;
        let mut base = 0.0;
        let n = 12;
        for i in 0..n {
            let mut rng = ChaCha12Rng::seed_from_u64(400 + i);
            let clean = procedural_clean(96, 96, &mut rng).unwrap();
            let spec = SnowMaskSpec {
                flake_density: density,
                opacity_range: (op_min, op_max),
                seed: 500 + i,
                ..SnowMaskSpec::default()
            };
            let s = gen_sample(clean, &spec, 500 + i).unwrap();
            cov += s.mask.data().iter().filter(|&&v| v > 0.05).count() as f64
                / s.mask.data().len() as f64;
            base += psnr(&s.snow.data().clone().into_dyn(), &s.clean.data().clone().into_dyn(), 1.0)
                .unwrap();
        }
        println!(
            "{label:<8} density {density:>4.1} opacity ({op_min:.2},{op_max:.2}): coverage {:.1}%  baseline {:.2} dB",
            100.0 * cov / n as f64,
            base / n as f64
        );
    }
}

#[test]
fn probe_gradient_norms_at_init() {
    use lmq::loss::restoration_loss_t;
    use lmq::mqformer::Mqformer;
    let mut cfg = Config::defaults();
    cfg.apply_preset("desk").unwrap();
    let mcfg = cfg.mqformer_config().unwrap();
    let mut ps = ParamStore::new();
    let mut st = StateStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let model = Mqformer::new(&mcfg, &mut ps, &mut st, &mut rng).unwrap();

    let spec = cfg.snow_spec(7).unwrap();
    let mut snow = Arr::zeros(IxDyn(&[4, 3, 64, 64]));
    let mut clean = Arr::zeros(IxDyn(&[4, 3, 64, 64]));
    for i in 0..4u64 {
        let mut r2 = ChaCha12Rng::seed_from_u64(60 + i);
        let c = procedural_clean(64, 64, &mut r2).unwrap();
        let s = gen_sample(c, &spec, 160 + i).unwrap();
        snow.index_axis_mut(Axis(0), i as usize).assign(&s.snow.data().view());
        clean.index_axis_mut(Axis(0), i as usize).assign(&s.clean.data().view());
    }
    let cmask = Arr::zeros(IxDyn(&[4, 1, 64, 64]));

    let w = LossWeights::default();
    let fx = FrozenFeatures::seeded();
    let tape = Tape::new();
    let fw = Fwd::train(&tape, &ps, &mut st);
    let img = tape.leaf(snow);
    let msk = tape.leaf(cmask);
    let gt = tape.leaf(clean);
    let out = model.forward(&fw, img, msk).unwrap();
    let loss = restoration_loss_t(out.restored, gt, &w, &fx).unwrap();
    println!("loss at init = {:.6e}", loss.scalar());
    let mut grads = tape.backward(loss);
    let gv = fw.param_grads(&mut grads);
    let mut rows: Vec<(String, f64, usize)> = ps
        .iter()
        .zip(gv.iter())
        .map(|((name, p), g)| {
            let n = g
                .as_ref()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                .unwrap_or(0.0);
            (name.to_string(), n, p.len())
        })
        .collect();
    let zero_count = rows.iter().filter(|r| r.1 == 0.0).count();
    println!("{} of {} params have exactly zero gradient", zero_count, rows.len());
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (name, n, len) in rows.iter().take(18) {
        println!("  {name:<28} |g| = {n:.4e}  ({len})");
    }
    for probe in ["mq.final.w", "mq.head.w", "mq.fuse1.w", "mq.pde.conv1.w"] {
        if let Some(r) = rows.iter().find(|r| r.0 == probe) {
            println!("  probe {:<22} |g| = {:.4e}", r.0, r.1);
        }
    }
}

#[test]
fn probe_stage2_early_steps() {
    let dir = tempdir().unwrap();
    let mut cfg = Config::defaults();
    cfg.apply_preset("desk").unwrap();
    cfg.set("synth.n_samples", "40").unwrap();
    let splits = make_dataset(
        None,
        dir.path(),
        &cfg.snow_spec(7).unwrap(),
        &cfg.dataset_params().unwrap(),
    )
    .unwrap();
    let mut log = TrainLogger::quiet();
    let s1 = train_stage1(&splits.train, &cfg, None, RunBudget::Steps(120), &mut log).unwrap();
    let s2 = train_stage2(
        &splits.train,
        &s1.checkpoint,
        &cfg,
        None,
        RunBudget::Steps(60),
        &mut log,
    )
    .unwrap();
    for (i, l) in s2.step_losses.iter().enumerate() {
        println!("step {i:3} loss {l:.6e}");
    }
}
