//! `lmq` — synthetic snow data, two-stage training, evaluation, ablation,
//! and single-image restoration from one binary.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lmq::ckpt::Checkpoint;
use lmq::config::Config;
use lmq::params::{ParamStore, StateStore};
use lmq::synth::{make_dataset, Manifest};
use lmq::train::{
    evaluate, infer, run_ablation, train_stage1, train_stage2, RunBudget, StageResult,
    TrainLogger,
};
use lmq::vqvae::count_parameters;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lmq",
    version,
    about = "Lightweight snow removal: data synthesis, two-stage training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration layering, applied in order: defaults, preset, config file,
/// --set overrides, --seed.
#[derive(Args)]
struct ConfigArgs {
    /// Named preset applied first (desk or full)
    #[arg(long)]
    preset: Option<String>,
    /// key=value config file layered over the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual key=value overrides, applied last (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (shorthand for --set train.seed=N)
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = Config::defaults();
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(f) = &self.config {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg.set("train.seed", &s.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic snow dataset (clean/snow/mask triplets + manifests)
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Directory of clean PNGs to composite over (procedural scenes if omitted)
        #[arg(long)]
        clean_dir: Option<PathBuf>,
    },
    /// Stage 1: train the coarse-mask generator
    TrainVqvae {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory produced by `synth`
        #[arg(long)]
        data: PathBuf,
        /// Directory the checkpoint is written into
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier stage-1 checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation
        #[arg(long)]
        epoch_limit: Option<usize>,
        /// Stop after this many optimization steps in this invocation
        #[arg(long)]
        step_limit: Option<u64>,
    },
    /// Stage 2: train the recovery network against a frozen stage-1 checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint providing the frozen coarse-mask generator
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epoch_limit: Option<usize>,
        #[arg(long)]
        step_limit: Option<u64>,
    },
    /// Evaluate a model pair on one manifest split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        /// Stage-2 checkpoint to evaluate
        #[arg(long)]
        model: PathBuf,
        /// Which manifest to score (train, val, or test)
        #[arg(long, default_value = "test")]
        split: String,
        /// Also append the metric row to this CSV file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Restore one snowy image
    Infer {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a normalized view of the coarse mask
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train and score every variant along one ablation axis
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ablation axis: modules or queries
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        /// Directory the CSV table is written into
        #[arg(long)]
        out: PathBuf,
        /// Manifest split used for scoring
        #[arg(long, default_value = "test")]
        eval_split: String,
        /// Per-variant optimization step budget (full schedule if omitted)
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Print the effective configuration and model parameter counts
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    lmq::init_parallelism();
    run(Cli::parse().cmd)
}

fn read_manifest(data: &Path, split: &str) -> Result<Manifest> {
    let path = data.join(format!("manifest_{split}.txt"));
    Manifest::read(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("{what} checkpoint not found at {}", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading {what} checkpoint"))
}

fn budget(epoch_limit: Option<usize>, step_limit: Option<u64>) -> Result<RunBudget> {
    match (epoch_limit, step_limit) {
        (None, None) => Ok(RunBudget::Full),
        (Some(e), None) => Ok(RunBudget::Epochs(e)),
        (None, Some(s)) => Ok(RunBudget::Steps(s)),
        (Some(_), Some(_)) => bail!("--epoch-limit and --step-limit are mutually exclusive"),
    }
}

fn scalar_count(ck: &Checkpoint) -> usize {
    ck.params.iter().map(|(_, a)| a.len()).sum()
}

fn finish_stage(res: &StageResult, out: &Path, file: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join(file);
    res.checkpoint.save(&path)?;
    println!("checkpoint={}", path.display());
    println!("epochs_completed={}", res.checkpoint.epoch);
    println!("steps_completed={}", res.checkpoint.rng_step);
    println!("params={}", scalar_count(&res.checkpoint));
    if let Some(last) = res.epoch_losses.last() {
        println!("final_epoch_loss={last:.6e}");
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { cfg, out, clean_dir } => {
            let cfg = cfg.build()?;
            let seed = cfg.u64_val("train.seed")?;
            let spec = cfg.snow_spec(seed)?;
            let params = cfg.dataset_params()?;
            let splits = make_dataset(clean_dir.as_deref(), &out, &spec, &params)?;
            println!("out={}", out.display());
            println!("train={}", splits.train.len());
            println!("val={}", splits.val.len());
            println!("test={}", splits.test.len());
            println!("skipped_clean_inputs={}", splits.skipped);
        }
        Cmd::TrainVqvae {
            cfg,
            data,
            out,
            resume,
            epoch_limit,
            step_limit,
        } => {
            let cfg = cfg.build()?;
            let manifest = read_manifest(&data, "train")?;
            let resume_ck = resume
                .map(|p| load_checkpoint(&p, "resume"))
                .transpose()?;
            let mut log = TrainLogger::verbose();
            let res = train_stage1(
                &manifest,
                &cfg,
                resume_ck.as_ref(),
                budget(epoch_limit, step_limit)?,
                &mut log,
            )?;
            finish_stage(&res, &out, "stage1.ckpt")?;
        }
        Cmd::Train {
            cfg,
            data,
            vqvae,
            out,
            resume,
            epoch_limit,
            step_limit,
        } => {
            let cfg = cfg.build()?;
            let manifest = read_manifest(&data, "train")?;
            let vq_ck = load_checkpoint(&vqvae, "stage-1")?;
            let resume_ck = resume
                .map(|p| load_checkpoint(&p, "resume"))
                .transpose()?;
            let mut log = TrainLogger::verbose();
            let res = train_stage2(
                &manifest,
                &vq_ck,
                &cfg,
                resume_ck.as_ref(),
                budget(epoch_limit, step_limit)?,
                &mut log,
            )?;
            finish_stage(&res, &out, "stage2.ckpt")?;
        }
        Cmd::Eval {
            cfg,
            data,
            vqvae,
            model,
            split,
            csv,
        } => {
            let cfg = cfg.build()?;
            let manifest = read_manifest(&data, &split)?;
            let vq_ck = load_checkpoint(&vqvae, "stage-1")?;
            let mq_ck = load_checkpoint(&model, "stage-2")?;
            let crop = cfg.usize_val("eval.crop")?;
            let report = evaluate(&vq_ck, &mq_ck, &manifest, crop)?;
            print!("{}", report.to_kv());
            if let Some(path) = csv {
                let mut text = String::new();
                if !path.exists() {
                    text.push_str(lmq::metrics::MetricReport::CSV_HEADER);
                    text.push('\n');
                }
                text.push_str(&report.restored.to_csv_row());
                text.push('\n');
                let existing = if path.exists() {
                    std::fs::read_to_string(&path)?
                } else {
                    String::new()
                };
                std::fs::write(&path, existing + &text)?;
                println!("csv={}", path.display());
            }
        }
        Cmd::Infer {
            vqvae,
            model,
            input,
            output,
            mask,
        } => {
            let vq_ck = load_checkpoint(&vqvae, "stage-1")?;
            let mq_ck = load_checkpoint(&model, "stage-2")?;
            infer(&vq_ck, &mq_ck, &input, &output, mask.as_deref())?;
            println!("output={}", output.display());
            if let Some(m) = mask {
                println!("mask={}", m.display());
            }
        }
        Cmd::Ablate {
            cfg,
            axis,
            data,
            out,
            eval_split,
            steps,
        } => {
            let cfg = cfg.build()?;
            let train_manifest = read_manifest(&data, "train")?;
            let eval_manifest = read_manifest(&data, &eval_split)?;
            let b = match steps {
                Some(s) => RunBudget::Steps(s),
                None => RunBudget::Full,
            };
            let mut log = TrainLogger::verbose();
            let table = run_ablation(
                &axis,
                &cfg,
                &[],
                &train_manifest,
                &eval_manifest,
                b,
                &mut log,
            )?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("ablation_{axis}.csv"));
            std::fs::write(&path, &table)?;
            print!("{table}");
            println!("csv={}", path.display());
        }
        Cmd::Params { cfg } => {
            let cfg = cfg.build()?;
            print!("{}", cfg.to_kv_text());
            let mut vq_ps = ParamStore::new();
            let mut rng = rand_seeded();
            lmq::vqvae::LaplaceVqvae::new(&cfg.vqvae_config()?, &mut vq_ps, &mut rng)?;
            let mut mq_ps = ParamStore::new();
            let mut mq_st = StateStore::new();
            lmq::mqformer::Mqformer::new(&cfg.mqformer_config()?, &mut mq_ps, &mut mq_st, &mut rng)?;
            let vq_n = count_parameters(&vq_ps);
            let mq_n = count_parameters(&mq_ps);
            println!("params_vqvae={vq_n}");
            println!("params_mqformer={mq_n}");
            println!("params_total={}", vq_n + mq_n);
        }
    }
    Ok(())
}

fn rand_seeded() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha12Rng::seed_from_u64(0)
}
