//! Flat key=value run configuration: a fixed table of known keys with
//! defaults, optional file overlay, then CLI overrides on top. Unknown keys
//! fail fast so a typo can never silently fall back to a default.

use crate::mqformer::{EncoderLayout, MqformerConfig};
use crate::synth::{DatasetParams, SnowMaskSpec};
use crate::vqvae::VqvaeConfig;
use crate::{LmqError, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Ordered key=value map with typed accessors.
#[derive(Clone)]
pub struct Config {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

/// Every known key with its stock default, in display order.
const DEFAULTS: &[(&str, &str)] = &[
    ("data.root", "data"),
    ("synth.n_samples", "232"),
    ("synth.height", "96"),
    ("synth.width", "96"),
    ("synth.train_frac", "0.86"),
    ("synth.val_frac", "0.0"),
    ("synth.test_frac", "0.14"),
    ("synth.flake_density", "10.0"),
    ("synth.opacity_min", "0.55"),
    ("synth.opacity_max", "1.0"),
    ("vqvae.base_channels", "24"),
    ("vqvae.codebook_size", "512"),
    ("vqvae.commitment_beta", "0.25"),
    ("mq.channels", "32,64,128"),
    ("mq.blocks", "2,2,2"),
    ("mq.n_queries", "8"),
    ("mq.mlp_ratio", "4"),
    ("mq.ca_kernel", "7"),
    ("mq.layout", "parallel"),
    ("mq.use_mask", "true"),
    ("train.stage1_epochs", "100"),
    ("train.stage2_epochs", "400"),
    ("train.batch_size", "8"),
    ("train.crop", "256"),
    ("train.lr_init", "2e-4"),
    ("train.lr_min", "1e-6"),
    ("train.weight_decay", "1e-4"),
    ("train.seed", "7"),
    ("train.device", "cpu"),
    ("eval.crop", "256"),
];

/// Keys rewritten by the desk preset: quartered channels, small crops,
/// and step counts sized so the whole two-stage pipeline runs on a CPU
/// in well under an hour.
const DESK_PRESET: &[(&str, &str)] = &[
    ("synth.height", "96"),
    ("synth.width", "96"),
    ("vqvae.base_channels", "6"),
    ("mq.channels", "8,16,32"),
    ("train.stage1_epochs", "10"),
    ("train.stage2_epochs", "40"),
    ("train.batch_size", "4"),
    ("train.crop", "64"),
    ("eval.crop", "64"),
];

impl Config {
    /// The stock configuration (the full-scale training recipe).
    pub fn defaults() -> Self {
        let mut c = Config {
            entries: Vec::with_capacity(DEFAULTS.len()),
            index: HashMap::new(),
        };
        for &(k, v) in DEFAULTS {
            c.index.insert(k.to_string(), c.entries.len());
            c.entries.push((k.to_string(), v.to_string()));
        }
        c
    }

    /// Applies a named preset on top of the current values.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => Ok(()),
            "desk" => {
                for &(k, v) in DESK_PRESET {
                    self.set(k, v)?;
                }
                Ok(())
            }
            other => Err(LmqError::config(format!(
                "unknown preset '{other}' (expected desk or full)"
            ))),
        }
    }

    /// Overrides one known key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.index.get(key) {
            Some(&i) => {
                self.entries[i].1 = value.to_string();
                Ok(())
            }
            None => Err(LmqError::config(format!("unknown config key '{key}'"))),
        }
    }

    /// Parses `key=value` lines (blank lines and `#` comments skipped) and
    /// overrides each named key.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LmqError::config(format!("line {}: expected key=value, got '{line}'", ln + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
            .map_err(|e| LmqError::config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` override strings (the CLI layer, last to win).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| LmqError::config(format!("override '{p}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.index
            .get(key)
            .map(|&i| self.entries[i].1.as_str())
            .ok_or_else(|| LmqError::config(format!("unknown config key '{key}'")))
    }

    pub fn f64_val(&self, key: &str) -> Result<f64> {
        let s = self.get(key)?;
        s.parse()
            .map_err(|_| LmqError::config(format!("{key}='{s}' is not a number")))
    }

    pub fn usize_val(&self, key: &str) -> Result<usize> {
        let s = self.get(key)?;
        s.parse()
            .map_err(|_| LmqError::config(format!("{key}='{s}' is not a non-negative integer")))
    }

    pub fn u64_val(&self, key: &str) -> Result<u64> {
        let s = self.get(key)?;
        s.parse()
            .map_err(|_| LmqError::config(format!("{key}='{s}' is not a non-negative integer")))
    }

    pub fn bool_val(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            s => Err(LmqError::config(format!("{key}='{s}' is not a boolean"))),
        }
    }

    /// Comma-separated integer list, e.g. `32,64,128`.
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let s = self.get(key)?;
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| LmqError::config(format!("{key}='{s}' is not an integer list")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// `key=value` lines in table order (the `params` listing and the
    /// checkpoint config echo).
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.iter() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Pairs for checkpoint capture.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        self.entries.clone()
    }

    pub fn vqvae_config(&self) -> Result<VqvaeConfig> {
        let cfg = VqvaeConfig {
            base_channels: self.usize_val("vqvae.base_channels")?,
            codebook_size: self.usize_val("vqvae.codebook_size")?,
            commitment_beta: self.f64_val("vqvae.commitment_beta")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mqformer_config(&self) -> Result<MqformerConfig> {
        let ch = self.usize_list("mq.channels")?;
        let bl = self.usize_list("mq.blocks")?;
        if ch.len() != 3 || bl.len() != 3 {
            return Err(LmqError::config(
                "mq.channels and mq.blocks must each list 3 values",
            ));
        }
        let layout = match self.get("mq.layout")? {
            "parallel" => EncoderLayout::Parallel,
            "hybrid" => EncoderLayout::Hybrid,
            s => {
                return Err(LmqError::config(format!(
                    "mq.layout='{s}' (expected parallel or hybrid)"
                )))
            }
        };
        let cfg = MqformerConfig {
            stage_channels: [ch[0], ch[1], ch[2]],
            blocks_per_stage: [bl[0], bl[1], bl[2]],
            n_queries: self.usize_val("mq.n_queries")?,
            mlp_ratio: self.usize_val("mq.mlp_ratio")?,
            ca_kernel: self.usize_val("mq.ca_kernel")?,
            reduction_kernel: 4,
            use_mask: self.bool_val("mq.use_mask")?,
            layout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn snow_spec(&self, seed: u64) -> Result<SnowMaskSpec> {
        let spec = SnowMaskSpec {
            flake_density: self.f64_val("synth.flake_density")?,
            opacity_range: (
                self.f64_val("synth.opacity_min")?,
                self.f64_val("synth.opacity_max")?,
            ),
            seed,
            ..SnowMaskSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dataset_params(&self) -> Result<DatasetParams> {
        let p = DatasetParams {
            n_samples: self.usize_val("synth.n_samples")?,
            split_fractions: (
                self.f64_val("synth.train_frac")?,
                self.f64_val("synth.val_frac")?,
                self.f64_val("synth.test_frac")?,
            ),
            height: self.usize_val("synth.height")?,
            width: self.usize_val("synth.width")?,
        };
        Ok(p)
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::defaults()
    }
}
