//! Two-stage training orchestration: stage 1 fits the coarse-mask generator
//! with Adam, stage 2 freezes it and fits the recovery network with AdamW.
//! Every batch is a pure function of (seed, step), so runs replay exactly —
//! including across a checkpoint/resume boundary — and the evaluation,
//! ablation, and single-image restoration entry points live here too.

use crate::ckpt::{params_hash, Checkpoint};
use crate::config::Config;
use crate::img::ImageTensor;
use crate::laplace::{coarse_mask_target, laplace_filter, to_grayscale};
use crate::loss::{restoration_loss_t, vqvae_loss_t, FrozenFeatures, LossWeights};
use crate::metrics::MetricReport;
use crate::mqformer::Mqformer;
use crate::optim::{cosine_lr, OptimConfig, Optimizer};
use crate::params::{Fwd, ParamStore, StateStore};
use crate::synth::{center_crop, derive_seed, random_crop_flip, Manifest, SynthSample};
use crate::tape::{pad2d_rb, Arr, PadMode, Tape};
use crate::vqvae::{count_parameters, vqvae_forward, LaplaceVqvae, QuantizeMode};
use crate::{LmqError, Result};
use ndarray::{s, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::time::Instant;

/// Per-stage optimization settings, resolved from a [`Config`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub device: String,
}

impl TrainConfig {
    pub fn stage1(cfg: &Config) -> Result<Self> {
        let tc = TrainConfig {
            stage: 1,
            epochs: cfg.usize_val("train.stage1_epochs")?,
            batch_size: cfg.usize_val("train.batch_size")?,
            crop: cfg.usize_val("train.crop")?,
            lr_init: cfg.f64_val("train.lr_init")?,
            lr_min: cfg.f64_val("train.lr_min")?,
            weight_decay: 0.0,
            seed: cfg.u64_val("train.seed")?,
            device: cfg.get("train.device")?.to_string(),
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn stage2(cfg: &Config) -> Result<Self> {
        let tc = TrainConfig {
            stage: 2,
            epochs: cfg.usize_val("train.stage2_epochs")?,
            batch_size: cfg.usize_val("train.batch_size")?,
            crop: cfg.usize_val("train.crop")?,
            lr_init: cfg.f64_val("train.lr_init")?,
            lr_min: cfg.f64_val("train.lr_min")?,
            weight_decay: cfg.f64_val("train.weight_decay")?,
            seed: cfg.u64_val("train.seed")?,
            device: cfg.get("train.device")?.to_string(),
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > self.lr_min && self.lr_min > 0.0) {
            return Err(LmqError::config(format!(
                "learning rates must satisfy lr_init > lr_min > 0, got {} and {}",
                self.lr_init, self.lr_min
            )));
        }
        if self.epochs < 1 {
            return Err(LmqError::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(LmqError::config("batch_size must be at least 1"));
        }
        let min_side = if self.stage == 1 { 16 } else { 32 };
        if self.crop % 8 != 0 || self.crop < min_side {
            return Err(LmqError::config(format!(
                "crop must be a multiple of 8 and at least {min_side}, got {}",
                self.crop
            )));
        }
        Ok(())
    }
}

/// How much of the configured schedule one invocation runs. `Full` trains to
/// `epochs`; the bounded variants stop early and checkpoint, so a later run
/// can resume exactly where this one left off.
#[derive(Clone, Copy, Debug)]
pub enum RunBudget {
    Full,
    Epochs(usize),
    Steps(u64),
}

/// Collects progress lines; echoes them to stderr when verbose.
pub struct TrainLogger {
    verbose: bool,
    pub lines: Vec<String>,
}

impl TrainLogger {
    pub fn quiet() -> Self {
        TrainLogger {
            verbose: false,
            lines: Vec::new(),
        }
    }

    pub fn verbose() -> Self {
        TrainLogger {
            verbose: true,
            lines: Vec::new(),
        }
    }

    pub fn log(&mut self, line: String) {
        if self.verbose {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }
}

/// What a training invocation hands back: the final checkpoint plus the loss
/// history it produced (per completed epoch and per step).
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

// ---- data plumbing ----------------------------------------------------------

fn load_all(manifest: &Manifest) -> Result<Vec<SynthSample>> {
    if manifest.len() == 0 {
        return Err(LmqError::invalid("manifest lists no samples"));
    }
    (0..manifest.len()).map(|i| manifest.load_sample(i)).collect()
}

/// Sample visiting order for one epoch — a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "order", epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn stack_images<'a>(images: impl Iterator<Item = &'a ImageTensor>, c: usize, side: usize) -> Arr {
    let views: Vec<_> = images.map(|im| im.data().view()).collect();
    let mut out = Arr::zeros(IxDyn(&[views.len(), c, side, side]));
    for (i, v) in views.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(v);
    }
    out
}

/// Laplacian-of-gray network input and coarse-mask regression target for a
/// batch of crops, both `(b, 1, s, s)`.
fn stage1_batch(crops: &[SynthSample], side: usize) -> Result<(Arr, Arr)> {
    let mut input = Arr::zeros(IxDyn(&[crops.len(), 1, side, side]));
    let mut target = Arr::zeros(IxDyn(&[crops.len(), 1, side, side]));
    for (i, cr) in crops.iter().enumerate() {
        let lap = laplace_filter(&to_grayscale(&cr.snow)?)?;
        let tgt = coarse_mask_target(&cr.snow, &cr.clean)?;
        input.slice_mut(s![i, .., .., ..]).assign(&lap.data().view());
        target.slice_mut(s![i, .., .., ..]).assign(&tgt.data().view());
    }
    Ok((input, target))
}

fn config_echo(cfg: &Config, stage: u8) -> Vec<(String, String)> {
    let mut pairs = cfg.to_pairs();
    pairs.push(("train.stage".to_string(), stage.to_string()));
    pairs
}

/// Rebuilds a [`Config`] from a checkpoint's key=value echo.
pub fn config_from_pairs(pairs: &[(String, String)]) -> Result<Config> {
    let mut cfg = Config::defaults();
    for (k, v) in pairs {
        if k == "train.stage" {
            continue;
        }
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn checkpoint_stage(ck: &Checkpoint) -> Option<&str> {
    ck.config_value("train.stage")
}

// ---- the shared epoch loop --------------------------------------------------

struct LoopState {
    epoch: usize,
    step: u64,
    epoch_losses: Vec<f64>,
    step_losses: Vec<f64>,
}

/// Runs the seeded epoch/batch loop, calling `train_step` once per live
/// batch. Resume is a fast-forward: batches whose global step predates
/// `start_step` are skipped without being built, and because every batch
/// derives from (seed, step) alone the continuation is bit-exact.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    data: &[SynthSample],
    tc: &TrainConfig,
    budget: RunBudget,
    start_epoch: usize,
    start_step: u64,
    logger: &mut TrainLogger,
    mut train_step: impl FnMut(&[SynthSample], u64, f64) -> Result<f64>,
) -> Result<LoopState> {
    let n = data.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size) as u64;
    let total_steps = tc.epochs as u64 * steps_per_epoch;
    let end_epoch = match budget {
        RunBudget::Full | RunBudget::Steps(_) => tc.epochs,
        RunBudget::Epochs(k) => (start_epoch + k).min(tc.epochs),
    };
    let step_cap = match budget {
        RunBudget::Steps(k) => start_step + k,
        _ => u64::MAX,
    };

    let mut st = LoopState {
        epoch: start_epoch,
        // the global counter restarts at the epoch's base position; batches
        // already consumed by the run being resumed are skipped below
        step: start_epoch as u64 * steps_per_epoch,
        epoch_losses: Vec::new(),
        step_losses: Vec::new(),
    };
    'epochs: for e in start_epoch..end_epoch {
        let order = epoch_order(n, tc.seed, e);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if st.step < start_step {
                st.step += 1;
                continue;
            }
            if st.step >= step_cap {
                break 'epochs;
            }
            let batch_seed = derive_seed(tc.seed, "batch", st.step);
            let mut brng = ChaCha12Rng::seed_from_u64(batch_seed);
            let crops: Vec<SynthSample> = chunk
                .iter()
                .map(|&i| random_crop_flip(&data[i], tc.crop, &mut brng))
                .collect::<Result<_>>()?;
            let lr = cosine_lr(st.step.min(total_steps), total_steps, tc.lr_init, tc.lr_min)?;
            let lv = train_step(&crops, batch_seed, lr)?;
            if !lv.is_finite() {
                return Err(LmqError::NonFinite {
                    step: st.step as usize,
                    batch_seed,
                    details: format!("stage-{} loss became {lv}", tc.stage),
                });
            }
            st.step_losses.push(lv);
            sum += lv;
            count += 1;
            st.step += 1;
        }
        if count > 0 {
            let mean = sum / count as f64;
            st.epoch_losses.push(mean);
            logger.log(format!(
                "stage{} epoch {}/{} mean_loss {mean:.6e}",
                tc.stage,
                e + 1,
                tc.epochs
            ));
        }
        st.epoch = e + 1;
    }
    Ok(st)
}

// Resume always lands on an epoch boundary or inside the epoch recorded in
// the checkpoint; recompute where the fast-forward must stop.
fn resume_position(ck: &Checkpoint, steps_per_epoch: u64) -> (usize, u64) {
    let full_epochs = (ck.rng_step / steps_per_epoch) as usize;
    // a mid-epoch stop restarts that epoch and skips the consumed batches
    (full_epochs.min(ck.epoch as usize), ck.rng_step)
}

// ---- stage 1: coarse-mask generator -----------------------------------------

/// Trains the Laplace-filtered coarse-mask generator from scratch (or from
/// `resume`) with Adam under a per-step cosine schedule.
pub fn train_stage1(
    manifest: &Manifest,
    cfg: &Config,
    resume: Option<&Checkpoint>,
    budget: RunBudget,
    logger: &mut TrainLogger,
) -> Result<StageResult> {
    let tc = TrainConfig::stage1(cfg)?;
    let vcfg = cfg.vqvae_config()?;
    let data = load_all(manifest)?;
    check_crop_fits(&data, tc.crop)?;

    let mut ps = ParamStore::new();
    let mut state = StateStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(tc.seed, "init-vqvae", 0));
    let model = LaplaceVqvae::new(&vcfg, &mut ps, &mut rng)?;
    let mut opt = Optimizer::new(&ps, OptimConfig::adam());

    let steps_per_epoch = data.len().div_ceil(tc.batch_size) as u64;
    let (mut start_epoch, mut start_step) = (0usize, 0u64);
    if let Some(ck) = resume {
        if checkpoint_stage(ck) != Some("1") {
            return Err(LmqError::config("resume checkpoint is not a stage-1 checkpoint"));
        }
        ck.apply(&mut ps, &mut state)?;
        if let Some(o) = &ck.optimizer {
            opt = Optimizer::restore(&ps, OptimConfig::adam(), o.m.clone(), o.v.clone(), o.step)?;
        }
        (start_epoch, start_step) = resume_position(ck, steps_per_epoch);
    }

    let lambda_cb = LossWeights::default().lambda_cb;
    let loop_state = run_epochs(
        &data,
        &tc,
        budget,
        start_epoch,
        start_step,
        logger,
        |crops, _batch_seed, lr| {
            let (input, target) = stage1_batch(crops, tc.crop)?;
            let (lv, grads_vec) = {
                let tape = Tape::new();
                let fw = Fwd::train(&tape, &ps, &mut state);
                let x = tape.leaf(input);
                let t = tape.leaf(target);
                let out = model.forward(&fw, x, QuantizeMode::Quantized)?;
                let loss = vqvae_loss_t(out.cmask, t, &out.codebook_losses, lambda_cb);
                let lv = loss.scalar();
                let mut grads = tape.backward(loss);
                (lv, fw.param_grads(&mut grads))
            };
            if lv.is_finite() {
                opt.step(&mut ps, &grads_vec, lr);
            }
            Ok(lv)
        },
    )?;

    let ck = Checkpoint::capture(
        &config_echo(cfg, 1),
        loop_state.epoch as u64,
        tc.seed,
        loop_state.step,
        &ps,
        &state,
        Some(&opt),
    );
    Ok(StageResult {
        checkpoint: ck,
        epoch_losses: loop_state.epoch_losses,
        step_losses: loop_state.step_losses,
    })
}

// ---- stage 2: recovery network ----------------------------------------------

/// Rebuilds the coarse-mask generator a stage-1 checkpoint describes.
pub fn build_vqvae(ck: &Checkpoint) -> Result<(LaplaceVqvae, ParamStore, StateStore)> {
    if checkpoint_stage(ck) != Some("1") {
        return Err(LmqError::config(
            "expected a stage-1 (coarse-mask generator) checkpoint",
        ));
    }
    let cfg = config_from_pairs(&ck.config)?;
    let vcfg = cfg.vqvae_config()?;
    let mut ps = ParamStore::new();
    let mut st = StateStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let model = LaplaceVqvae::new(&vcfg, &mut ps, &mut rng)?;
    ck.apply(&mut ps, &mut st)?;
    Ok((model, ps, st))
}

/// Rebuilds the recovery network a stage-2 checkpoint describes.
pub fn build_mqformer(ck: &Checkpoint) -> Result<(Mqformer, ParamStore, StateStore)> {
    if checkpoint_stage(ck) != Some("2") {
        return Err(LmqError::config(
            "expected a stage-2 (recovery network) checkpoint",
        ));
    }
    let cfg = config_from_pairs(&ck.config)?;
    let mcfg = cfg.mqformer_config()?;
    let mut ps = ParamStore::new();
    let mut st = StateStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let model = Mqformer::new(&mcfg, &mut ps, &mut st, &mut rng)?;
    ck.apply(&mut ps, &mut st)?;
    Ok((model, ps, st))
}

/// Trains the recovery network with AdamW while the coarse-mask generator
/// from `vqvae_ck` stays frozen; its parameter hash is asserted unchanged.
pub fn train_stage2(
    manifest: &Manifest,
    vqvae_ck: &Checkpoint,
    cfg: &Config,
    resume: Option<&Checkpoint>,
    budget: RunBudget,
    logger: &mut TrainLogger,
) -> Result<StageResult> {
    let tc = TrainConfig::stage2(cfg)?;
    let mcfg = cfg.mqformer_config()?;
    let data = load_all(manifest)?;
    check_crop_fits(&data, tc.crop)?;

    let (vq_model, vq_ps, vq_st) = build_vqvae(vqvae_ck)?;
    let frozen_before = params_hash(&vq_ps);

    let mut ps = ParamStore::new();
    let mut state = StateStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(tc.seed, "init-mqformer", 0));
    let model = Mqformer::new(&mcfg, &mut ps, &mut state, &mut rng)?;
    let mut opt = Optimizer::new(&ps, OptimConfig::adamw(tc.weight_decay));

    let steps_per_epoch = data.len().div_ceil(tc.batch_size) as u64;
    let (mut start_epoch, mut start_step) = (0usize, 0u64);
    if let Some(ck) = resume {
        if checkpoint_stage(ck) != Some("2") {
            return Err(LmqError::config("resume checkpoint is not a stage-2 checkpoint"));
        }
        ck.apply(&mut ps, &mut state)?;
        if let Some(o) = &ck.optimizer {
            opt = Optimizer::restore(
                &ps,
                OptimConfig::adamw(tc.weight_decay),
                o.m.clone(),
                o.v.clone(),
                o.step,
            )?;
        }
        (start_epoch, start_step) = resume_position(ck, steps_per_epoch);
    }

    let weights = LossWeights::default();
    let features = FrozenFeatures::seeded();
    let loop_state = run_epochs(
        &data,
        &tc,
        budget,
        start_epoch,
        start_step,
        logger,
        |crops, _batch_seed, lr| {
            let snow = stack_images(crops.iter().map(|c| &c.snow), 3, tc.crop);
            let clean = stack_images(crops.iter().map(|c| &c.clean), 3, tc.crop);
            let mut cmask = Arr::zeros(IxDyn(&[crops.len(), 1, tc.crop, tc.crop]));
            for (i, cr) in crops.iter().enumerate() {
                let (m, _) = vqvae_forward(&cr.snow, &vq_model, &vq_ps, &vq_st)?;
                cmask.slice_mut(s![i, .., .., ..]).assign(&m.data().view());
            }
            let (lv, grads_vec) = {
                let tape = Tape::new();
                let fw = Fwd::train(&tape, &ps, &mut state);
                let img = tape.leaf(snow);
                let msk = tape.leaf(cmask);
                let gt = tape.leaf(clean);
                let out = model.forward(&fw, img, msk)?;
                let loss = restoration_loss_t(out.restored, gt, &weights, &features)?;
                let lv = loss.scalar();
                let mut grads = tape.backward(loss);
                (lv, fw.param_grads(&mut grads))
            };
            if lv.is_finite() {
                opt.step(&mut ps, &grads_vec, lr);
            }
            Ok(lv)
        },
    )?;

    let frozen_after = params_hash(&vq_ps);
    if frozen_before != frozen_after {
        return Err(LmqError::invalid(
            "frozen coarse-mask parameters changed during stage 2",
        ));
    }

    let ck = Checkpoint::capture(
        &config_echo(cfg, 2),
        loop_state.epoch as u64,
        tc.seed,
        loop_state.step,
        &ps,
        &state,
        Some(&opt),
    );
    Ok(StageResult {
        checkpoint: ck,
        epoch_losses: loop_state.epoch_losses,
        step_losses: loop_state.step_losses,
    })
}

fn check_crop_fits(data: &[SynthSample], crop: usize) -> Result<()> {
    for s in data {
        if s.clean.height() < crop || s.clean.width() < crop {
            return Err(LmqError::invalid(format!(
                "crop {crop} exceeds a {}x{} dataset image",
                s.clean.height(),
                s.clean.width()
            )));
        }
    }
    Ok(())
}

// ---- evaluation -------------------------------------------------------------

/// Restores one snowy image through both networks; output is clamped to
/// [0, 1]. Inference-only — nothing here touches a gradient tape root.
pub fn restore_image(
    img: &ImageTensor,
    vq: &(LaplaceVqvae, ParamStore, StateStore),
    mq: &(Mqformer, ParamStore, StateStore),
) -> Result<ImageTensor> {
    let (cmask, _) = vqvae_forward(img, &vq.0, &vq.1, &vq.2)?;
    let tape = Tape::new();
    let fw = Fwd::eval(&tape, &mq.1, &mq.2);
    let x = tape.leaf(img.data().clone().into_dyn().insert_axis(Axis(0)));
    let m = tape.leaf(cmask.data().clone().into_dyn().insert_axis(Axis(0)));
    let out = mq.0.forward(&fw, x, m)?;
    let restored = out.restored.value().mapv(|v| v.clamp(0.0, 1.0));
    let restored = restored.index_axis_move(Axis(0), 0);
    ImageTensor::new(restored.into_dimensionality().unwrap())
}

/// Quality metrics plus runtime and size for one model pair on one split.
pub struct EvalReport {
    pub restored: MetricReport,
    pub baseline: MetricReport,
    pub seconds_per_image: f64,
    pub params_vqvae: usize,
    pub params_mqformer: usize,
}

impl EvalReport {
    /// key=value lines (machine-parsable run summary).
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "restored.psnr_db={:.4}", self.restored.psnr_db);
        let _ = writeln!(out, "restored.ssim={:.5}", self.restored.ssim);
        let _ = writeln!(out, "restored.mae={:.4}", self.restored.mae);
        let _ = writeln!(out, "baseline.psnr_db={:.4}", self.baseline.psnr_db);
        let _ = writeln!(out, "baseline.ssim={:.5}", self.baseline.ssim);
        let _ = writeln!(out, "baseline.mae={:.4}", self.baseline.mae);
        let _ = writeln!(out, "n_images={}", self.restored.n_images);
        let _ = writeln!(out, "seconds_per_image={:.4}", self.seconds_per_image);
        let _ = writeln!(out, "params_vqvae={}", self.params_vqvae);
        let _ = writeln!(out, "params_mqformer={}", self.params_mqformer);
        out
    }
}

/// Center-crop evaluation over a manifest split: averaged restored-vs-clean
/// metrics, the snowy-vs-clean baseline, and per-image wall time on the
/// fixed crop size.
pub fn evaluate(
    vqvae_ck: &Checkpoint,
    mqformer_ck: &Checkpoint,
    manifest: &Manifest,
    crop: usize,
) -> Result<EvalReport> {
    if manifest.len() == 0 {
        return Err(LmqError::invalid("manifest lists no samples"));
    }
    let vq = build_vqvae(vqvae_ck)?;
    let mq = build_mqformer(mqformer_ck)?;
    let mut restored_rows = Vec::with_capacity(manifest.len());
    let mut baseline_rows = Vec::with_capacity(manifest.len());
    let mut elapsed = 0.0f64;
    let dyn3 = |im: &ImageTensor| im.data().clone().into_dyn();
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let cc = center_crop(&sample, crop)?;
        let t0 = Instant::now();
        let restored = restore_image(&cc.snow, &vq, &mq)?;
        elapsed += t0.elapsed().as_secs_f64();
        restored_rows.push(MetricReport::for_pair(&dyn3(&restored), &dyn3(&cc.clean))?);
        baseline_rows.push(MetricReport::for_pair(&dyn3(&cc.snow), &dyn3(&cc.clean))?);
    }
    Ok(EvalReport {
        restored: MetricReport::average(&restored_rows)?,
        baseline: MetricReport::average(&baseline_rows)?,
        seconds_per_image: elapsed / manifest.len() as f64,
        params_vqvae: count_parameters(&vq.1),
        params_mqformer: count_parameters(&mq.1),
    })
}

// ---- single-image restoration -----------------------------------------------

/// Restores `input` and writes the result (and optionally a normalized view
/// of the coarse mask) as PNG. The image is reflect-padded on the bottom and
/// right to the next multiple of 8, restored, and cropped back, so output
/// dimensions always equal input dimensions.
pub fn infer(
    vqvae_ck: &Checkpoint,
    mqformer_ck: &Checkpoint,
    input: &std::path::Path,
    output: &std::path::Path,
    mask_output: Option<&std::path::Path>,
) -> Result<()> {
    let img = ImageTensor::load(input)?;
    if img.channels() != 3 {
        return Err(LmqError::invalid(format!(
            "expected a 3-channel input image, got {} channels",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h < 32 || w < 32 {
        return Err(LmqError::invalid(format!(
            "input must be at least 32x32, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let padded = if (ph, pw) == (h, w) {
        img
    } else {
        let tape = Tape::new();
        let x = tape.leaf(img.data().clone().into_dyn().insert_axis(Axis(0)));
        let y = pad2d_rb(x, ph - h, pw - w, PadMode::Reflect);
        let arr = y.value().index_axis_move(Axis(0), 0);
        ImageTensor::new(arr.into_dimensionality().unwrap())?
    };

    let vq = build_vqvae(vqvae_ck)?;
    let mq = build_mqformer(mqformer_ck)?;
    let restored = restore_image(&padded, &vq, &mq)?;
    let cropped = restored
        .data()
        .slice(s![.., 0..h, 0..w])
        .to_owned();
    ImageTensor::new(cropped)?.save(output)?;

    if let Some(mask_path) = mask_output {
        let (cmask, _) = vqvae_forward(&padded, &vq.0, &vq.1, &vq.2)?;
        let vis = cmask.to_image()?;
        let vis_cropped = vis.data().slice(s![.., 0..h, 0..w]).to_owned();
        ImageTensor::new(vis_cropped)?.save(mask_path)?;
    }
    Ok(())
}

// ---- ablation harness -------------------------------------------------------

/// Named configuration variants for one ablation axis.
fn ablation_variants(axis: &str) -> Result<Vec<(&'static str, Vec<(&'static str, &'static str)>)>> {
    match axis {
        "queries" => Ok(vec![
            ("q4", vec![("mq.n_queries", "4")]),
            ("q8", vec![("mq.n_queries", "8")]),
            ("q16", vec![("mq.n_queries", "16")]),
            ("q_per_token", vec![("mq.n_queries", "0")]),
        ]),
        "modules" => Ok(vec![
            ("parallel_mask", vec![("mq.layout", "parallel"), ("mq.use_mask", "true")]),
            ("parallel_nomask", vec![("mq.layout", "parallel"), ("mq.use_mask", "false")]),
            ("hybrid_mask", vec![("mq.layout", "hybrid"), ("mq.use_mask", "true")]),
            ("hybrid_nomask", vec![("mq.layout", "hybrid"), ("mq.use_mask", "false")]),
        ]),
        other => Err(LmqError::config(format!(
            "unknown ablation axis '{other}' (expected modules or queries)"
        ))),
    }
}

pub const ABLATION_CSV_HEADER: &str = "config,psnr_db,ssim,mae,n_images";

/// Trains every variant on one axis under identical seed and step budget and
/// returns a CSV table of held-out metrics, one row per variant. All variant
/// configurations (plus `extra` overrides) are validated before any training
/// starts; the coarse-mask stage is shared across variants since no variant
/// touches it.
pub fn run_ablation(
    axis: &str,
    base: &Config,
    extra: &[String],
    train_manifest: &Manifest,
    eval_manifest: &Manifest,
    budget: RunBudget,
    logger: &mut TrainLogger,
) -> Result<String> {
    let mut variants = Vec::new();
    for (label, pairs) in ablation_variants(axis)? {
        let mut cfg = base.clone();
        cfg.apply_overrides(extra)?;
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.mqformer_config()?;
        cfg.vqvae_config()?;
        TrainConfig::stage2(&cfg)?;
        variants.push((label, cfg));
    }

    logger.log(format!("ablation axis={axis}: training shared stage 1"));
    let stage1 = train_stage1(train_manifest, &variants[0].1, None, budget, logger)?;

    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for (label, cfg) in &variants {
        logger.log(format!("ablation axis={axis}: training variant {label}"));
        let stage2 = train_stage2(
            train_manifest,
            &stage1.checkpoint,
            cfg,
            None,
            budget,
            logger,
        )?;
        let crop = cfg.usize_val("eval.crop")?;
        let report = evaluate(&stage1.checkpoint, &stage2.checkpoint, eval_manifest, crop)?;
        let _ = writeln!(csv, "{label},{}", report.restored.to_csv_row());
    }
    Ok(csv)
}
