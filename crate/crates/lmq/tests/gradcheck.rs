//! Finite-difference verification of every building block and loss:
//! analytic tape gradients for all inputs and parameters must agree with
//! central differences to the default tolerance.

mod common;

use common::{fd_check_block, seeded_arr};
use lmq::gradcheck::{CheckResult, DEFAULT_TOLERANCE};
use lmq::loss::{
    charbonnier_t, edge_loss_t, perceptual_loss_t, vqvae_loss_t, FrozenFeatures,
};
use lmq::mqformer::{Cacm, Dmqa, EncoderLayout, Mqtm, MqformerConfig, Mscb, Pde};
use lmq::params::{Fwd, ParamStore, StateStore};
use lmq::tape::Var;
use lmq::vqvae::{quantize_t, LaplaceVqvae, QuantizeMode, Sacm, VqvaeConfig};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn assert_grads(label: &str, results: &[CheckResult]) {
    let worst = results
        .iter()
        .map(|r| r.rel_error)
        .fold(0.0f64, f64::max);
    println!("{label}: {} tensors, worst rel err {worst:.3e}", results.len());
    for r in results {
        assert!(
            r.rel_error <= DEFAULT_TOLERANCE,
            "{label} / {}: rel err {:.3e}",
            r.name,
            r.rel_error
        );
    }
}

fn run_sacm<'t>(b: &Sacm, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0])
}

#[test]
fn sacm_gradients() {
    let mut ps = ParamStore::default();
    let st = StateStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let block = Sacm::new(&mut ps, &mut rng, "sacm", 3);
    let x = seeded_arr(&[2, 3, 6, 6], 101);
    assert_grads("sacm", &fd_check_block(&block, &ps, &st, &[x], run_sacm));
}

fn run_cacm<'t>(b: &Cacm, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], Some(v[1])).unwrap()
}

fn run_cacm_nomask<'t>(b: &Cacm, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], None).unwrap()
}

fn tiny_mq_cfg() -> MqformerConfig {
    MqformerConfig {
        stage_channels: [4, 6, 8],
        blocks_per_stage: [1, 1, 1],
        n_queries: 2,
        mlp_ratio: 2,
        ca_kernel: 3,
        reduction_kernel: 4,
        use_mask: true,
        layout: EncoderLayout::Parallel,
    }
}

#[test]
fn cacm_gradients() {
    let mut ps = ParamStore::default();
    let mut st = StateStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(32);
    let cfg = tiny_mq_cfg();
    let block = Cacm::new(&mut ps, &mut st, &mut rng, "cacm", 4, &cfg);
    let x = seeded_arr(&[2, 4, 5, 5], 102);
    let m = seeded_arr(&[2, 4, 5, 5], 103);
    assert_grads(
        "cacm(mask)",
        &fd_check_block(&block, &ps, &st, &[x.clone(), m], run_cacm),
    );
    assert_grads(
        "cacm(none)",
        &fd_check_block(&block, &ps, &st, &[x], run_cacm_nomask),
    );
}

fn run_mscb<'t>(b: &Mscb, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], Some(v[1])).unwrap()
}

fn run_mscb_nomask<'t>(b: &Mscb, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], None).unwrap()
}

#[test]
fn mscb_gradients() {
    let mut ps = ParamStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    let mut st = StateStore::default();
    let block = Mscb::new(&mut ps, &mut st, &mut rng, "mscb", 3);
    let x = seeded_arr(&[2, 3, 6, 6], 104);
    let m = seeded_arr(&[2, 3, 6, 6], 105);
    assert_grads(
        "mscb(mask)",
        &fd_check_block(&block, &ps, &st, &[x.clone(), m], run_mscb),
    );
    assert_grads(
        "mscb(none)",
        &fd_check_block(&block, &ps, &st, &[x], run_mscb_nomask),
    );
}

fn run_dmqa<'t>(b: &Dmqa, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], Some(v[1])).unwrap()
}

fn run_dmqa_nomask<'t>(b: &Dmqa, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], None).unwrap()
}

#[test]
fn dmqa_gradients() {
    let mut ps = ParamStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(34);
    let block = Dmqa::new(&mut ps, &mut rng, "dmqa", 4, 2, 2);
    let st = StateStore::default();
    let x = seeded_arr(&[2, 4, 6, 6], 106);
    let m = seeded_arr(&[2, 4, 6, 6], 107);
    assert_grads(
        "dmqa(mask)",
        &fd_check_block(&block, &ps, &st, &[x.clone(), m], run_dmqa),
    );
    assert_grads(
        "dmqa(none)",
        &fd_check_block(&block, &ps, &st, &[x], run_dmqa_nomask),
    );
}

#[test]
fn dmqa_per_token_gradients() {
    let mut ps = ParamStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(35);
    let block = Dmqa::new(&mut ps, &mut rng, "dmqa", 3, 0, 2);
    let st = StateStore::default();
    let x = seeded_arr(&[1, 3, 6, 6], 108);
    let m = seeded_arr(&[1, 3, 6, 6], 109);
    assert_grads(
        "dmqa(per-token)",
        &fd_check_block(&block, &ps, &st, &[x, m], run_dmqa),
    );
}

fn run_mqtm<'t>(b: &Mqtm, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0], Some(v[1])).unwrap()
}

#[test]
fn mqtm_gradients() {
    let mut ps = ParamStore::default();
    let mut st = StateStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(36);
    let cfg = tiny_mq_cfg();
    let block = Mqtm::new(&mut ps, &mut st, &mut rng, "mqtm", 4, &cfg);
    // 6x6 is not divisible by the reduction stride, so this also covers the
    // internal round-up padding around the attention branch
    let x = seeded_arr(&[1, 4, 6, 6], 110);
    let m = seeded_arr(&[1, 4, 6, 6], 111);
    assert_grads("mqtm", &fd_check_block(&block, &ps, &st, &[x, m], run_mqtm));
}

fn run_pde<'t>(b: &Pde, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    b.forward(fw, v[0])
}

#[test]
fn pde_gradients() {
    let mut ps = ParamStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(37);
    let block = Pde::new(&mut ps, &mut rng, "pde");
    let st = StateStore::default();
    let x = seeded_arr(&[1, 3, 6, 6], 112);
    assert_grads("pde", &fd_check_block(&block, &ps, &st, &[x], run_pde));
}

fn run_charbonnier<'t>(eps: &f64, _fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    charbonnier_t(v[0], v[1], *eps)
}

fn run_edge<'t>(eps: &f64, _fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    edge_loss_t(v[0], v[1], *eps)
}

#[test]
fn charbonnier_and_edge_gradients() {
    let ps = ParamStore::default();
    let st = StateStore::default();
    let a = seeded_arr(&[1, 3, 6, 6], 113);
    let b = seeded_arr(&[1, 3, 6, 6], 114);
    let eps = 1e-3;
    assert_grads(
        "charbonnier",
        &fd_check_block(&eps, &ps, &st, &[a.clone(), b.clone()], run_charbonnier),
    );
    assert_grads("edge", &fd_check_block(&eps, &ps, &st, &[a, b], run_edge));
}

fn run_perceptual<'t>(fx: &FrozenFeatures, _fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    perceptual_loss_t(v[0], v[1], fx).unwrap()
}

#[test]
fn perceptual_default_gradients() {
    let ps = ParamStore::default();
    let st = StateStore::default();
    let fx = FrozenFeatures::seeded();
    let a = seeded_arr(&[1, 3, 8, 8], 115);
    let b = seeded_arr(&[1, 3, 8, 8], 116);
    assert_grads(
        "perceptual",
        &fd_check_block(&fx, &ps, &st, &[a, b], run_perceptual),
    );
}

fn run_vqvae_bypass<'t>(m: &LaplaceVqvae, fw: &Fwd<'t, '_>, v: &[Var<'t>]) -> Var<'t> {
    let out = m.forward(fw, v[0], QuantizeMode::Bypass).unwrap();
    vqvae_loss_t(out.cmask, v[1], &out.codebook_losses, 0.25)
}

/// End-to-end objective gradient with the discrete step bypassed; the
/// quantizer terms themselves are covered by `quantizer_loss_gradients`.
#[test]
fn vqvae_bypass_gradients() {
    let cfg = VqvaeConfig {
        base_channels: 4,
        codebook_size: 8,
        commitment_beta: 0.25,
    };
    let mut ps = ParamStore::default();
    let mut rng = ChaCha12Rng::seed_from_u64(38);
    let model = LaplaceVqvae::new(&cfg, &mut ps, &mut rng).unwrap();
    let st = StateStore::default();
    let x = seeded_arr(&[1, 1, 16, 16], 117);
    let target = seeded_arr(&[1, 1, 16, 16], 118);
    assert_grads(
        "vqvae(bypass)",
        &fd_check_block(&model, &ps, &st, &[x, target], run_vqvae_bypass),
    );
}

/// Quantizer loss, differentiated where the nearest-row assignment is
/// locally stable: codebook rows sit far apart and every encoder vector
/// starts near one of them.
///
/// Both halves of the loss share the same squared distances, so the raw
/// value is `(1 + β)·mean‖z − e‖²` and plain finite differences see the
/// full factor on either input. The analytic gradients intentionally stop
/// half of that flow (the encoder only feels the β·commitment half, the
/// table only the codebook half), so the check divides the numeric
/// gradient by the factor each input is contracted to receive.
#[test]
fn quantizer_loss_gradients() {
    use lmq::gradcheck::{finite_diff, l2_relative_error, DEFAULT_STEP};
    use lmq::tape::Tape;

    let d = 3;
    let rows = [
        [3.0, 0.0, 0.0],
        [0.0, 3.0, 0.0],
        [0.0, 0.0, 3.0],
        [-3.0, -3.0, -3.0],
    ];
    let codebook = ndarray::ArrayD::from_shape_vec(
        IxDyn(&[4, d]),
        rows.iter().flatten().cloned().collect(),
    )
    .unwrap();
    let (h, w) = (2, 2);
    let mut z = seeded_arr(&[1, d, h, w], 119);
    // pull each spatial vector close to a distinct codebook row
    for p in 0..h * w {
        for ci in 0..d {
            let e = z[[0, ci, p / w, p % w]] * 0.2 + rows[p % 4][ci];
            z[[0, ci, p / w, p % w]] = e;
        }
    }
    let beta = 0.25;

    let (gz, gcb) = {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let cv = tape.leaf(codebook.clone());
        let (_, qloss, _) = quantize_t(zv, cv, beta);
        let grads = tape.backward(qloss);
        (
            grads.wrt(zv).cloned().unwrap(),
            grads.wrt(cv).cloned().unwrap(),
        )
    };
    let numeric = finite_diff(
        |arrs: &[ndarray::ArrayD<f64>]| {
            let tape = Tape::new();
            let zv = tape.leaf(arrs[0].clone());
            let cv = tape.leaf(arrs[1].clone());
            quantize_t(zv, cv, beta).1.scalar()
        },
        &[z, codebook],
        DEFAULT_STEP,
    );
    let rz = l2_relative_error(&gz, &numeric[0].mapv(|v| v * beta / (1.0 + beta)));
    let rcb = l2_relative_error(&gcb, &numeric[1].mapv(|v| v / (1.0 + beta)));
    println!("quantizer-loss: encoder rel err {rz:.3e}, codebook rel err {rcb:.3e}");
    assert!(rz <= DEFAULT_TOLERANCE, "encoder half: {rz:.3e}");
    assert!(rcb <= DEFAULT_TOLERANCE, "codebook half: {rcb:.3e}");
}
