//! Versioned binary checkpoints: a config echo, every named parameter and
//! normalization buffer as 64-bit little-endian arrays, optimizer moments,
//! and the training position (epoch + rng stream), so a reloaded run
//! continues bit-for-bit where it stopped.

use crate::optim::Optimizer;
use crate::params::{ParamStore, StateStore};
use crate::tape::Arr;
use crate::{LmqError, Result};
use ndarray::{Array1, IxDyn};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"LMQC";
pub const CKPT_VERSION: u32 = 1;

/// Optimizer moments captured alongside the parameters, in parameter order.
pub struct OptState {
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

/// In-memory image of a checkpoint file.
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub epoch: u64,
    pub rng_seed: u64,
    pub rng_step: u64,
    pub params: Vec<(String, Arr)>,
    pub buffers: Vec<(String, Array1<f64>)>,
    pub optimizer: Option<OptState>,
}

impl Checkpoint {
    /// Snapshots the current training state.
    pub fn capture(
        config: &[(String, String)],
        epoch: u64,
        rng_seed: u64,
        rng_step: u64,
        params: &ParamStore,
        state: &StateStore,
        optimizer: Option<&Optimizer>,
    ) -> Self {
        Checkpoint {
            config: config.to_vec(),
            epoch,
            rng_seed,
            rng_step,
            params: params
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
            buffers: state
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
            optimizer: optimizer.map(|o| {
                let (m, v, step) = o.state();
                OptState {
                    step,
                    m: m.to_vec(),
                    v: v.to_vec(),
                }
            }),
        }
    }

    /// Writes every parameter and buffer back into live stores.
    pub fn apply(&self, params: &mut ParamStore, state: &mut StateStore) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(LmqError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, value) in &self.params {
            params.set_by_name(name, value.clone())?;
        }
        for (name, value) in &self.buffers {
            state.set_by_name(name, value.clone())?;
        }
        Ok(())
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg_text: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_bytes(&mut buf, cfg_text.as_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed.to_le_bytes());
        buf.extend_from_slice(&self.rng_step.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in &self.params {
            write_bytes(&mut buf, name.as_bytes());
            write_array(&mut buf, value);
        }
        buf.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for (name, value) in &self.buffers {
            write_bytes(&mut buf, name.as_bytes());
            write_array(&mut buf, &value.clone().into_dyn());
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                buf.extend_from_slice(&o.step.to_le_bytes());
                buf.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for a in o.m.iter().chain(o.v.iter()) {
                    write_array(&mut buf, a);
                }
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let mut r = Reader { data: &data, pos: 0 };
        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(LmqError::Checkpoint(format!(
                "bad magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(LmqError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| LmqError::Checkpoint("config echo is not UTF-8".into()))?;
        let config = cfg_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| match l.split_once('=') {
                Some((k, v)) => Ok((k.to_string(), v.to_string())),
                None => Err(LmqError::Checkpoint(format!("bad config line '{l}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()?;
        let rng_seed = r.u64()?;
        let rng_step = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| LmqError::Checkpoint("parameter name is not UTF-8".into()))?;
            params.push((name, r.array()?));
        }
        let n_buffers = r.u32()? as usize;
        let mut buffers = Vec::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| LmqError::Checkpoint("buffer name is not UTF-8".into()))?;
            let arr = r.array()?;
            let flat = arr
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| LmqError::Checkpoint("buffers must be 1-d".into()))?;
            buffers.push((name, flat));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let count = r.u32()? as usize;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(r.array()?);
                }
                for _ in 0..count {
                    v.push(r.array()?);
                }
                Some(OptState { step, m, v })
            }
            other => {
                return Err(LmqError::Checkpoint(format!(
                    "bad optimizer flag {other}"
                )))
            }
        };
        if r.pos != data.len() {
            return Err(LmqError::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                data.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            rng_seed,
            rng_step,
            params,
            buffers,
            optimizer,
        })
    }
}

fn write_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

fn write_array(buf: &mut Vec<u8>, a: &Arr) {
    buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let owned;
    let slice = match a.as_slice() {
        Some(s) => s,
        None => {
            owned = a.as_standard_layout().to_owned();
            owned.as_slice().unwrap()
        }
    };
    buf.extend_from_slice(&(slice.len() as u64).to_le_bytes());
    for v in slice {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(LmqError::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn array(&mut self) -> Result<Arr> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(LmqError::Checkpoint(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len = self.u64()? as usize;
        if shape.iter().product::<usize>() != len {
            return Err(LmqError::Checkpoint(format!(
                "shape {shape:?} does not hold {len} values"
            )));
        }
        let raw = self.take(len * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Arr::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|e| LmqError::Checkpoint(format!("bad array payload: {e}")))
    }
}

/// Hex SHA-256 over every parameter's name, shape, and exact bit pattern,
/// in store order. Used to prove a frozen stage never moved.
pub fn params_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, value) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes (checkpoint identity across runs).
pub fn file_hash(path: &Path) -> Result<String> {
    let data = fs::read(path)?;
    let d = Sha256::digest(&data);
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}
