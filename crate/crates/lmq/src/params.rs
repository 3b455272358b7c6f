//! Named parameter and state storage shared by every model.
//!
//! [`ParamStore`] holds the trainable arrays in a stable order (insertion
//! order, which is also checkpoint and optimizer order). [`StateStore`] holds
//! non-trained buffers — batch-norm running statistics — which are saved in
//! checkpoints but never counted as parameters. [`Fwd`] bundles a tape, the
//! parameter leaves and state access for one forward pass.

use crate::tape::{Arr, Tape, Var};
use ndarray::{Array1, IxDyn};
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufId(pub(crate) usize);

#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Arr)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Arr)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), &mut *v))
    }

    /// Overwrites an existing entry with same-shaped data (checkpoint load).
    pub fn set_by_name(&mut self, name: &str, value: Arr) -> crate::Result<()> {
        let Some(&i) = self.index.get(name) else {
            return Err(crate::LmqError::Checkpoint(format!(
                "unknown parameter {name}"
            )));
        };
        if self.entries[i].1.shape() != value.shape() {
            return Err(crate::LmqError::Checkpoint(format!(
                "parameter {name} shape mismatch: expected {:?}, got {:?}",
                self.entries[i].1.shape(),
                value.shape()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }
}

#[derive(Default, Clone)]
pub struct StateStore {
    entries: Vec<(String, Array1<f64>)>,
    index: HashMap<String, usize>,
}

impl StateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array1<f64>) -> BufId {
        assert!(!self.index.contains_key(name), "duplicate buffer name {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        BufId(self.entries.len() - 1)
    }

    pub fn get(&self, id: BufId) -> &Array1<f64> {
        &self.entries[id.0].1
    }

    /// Two distinct buffers borrowed mutably at once (mean + variance).
    pub fn pair_mut(&mut self, a: BufId, b: BufId) -> (&mut Array1<f64>, &mut Array1<f64>) {
        assert_ne!(a.0, b.0);
        let (lo, hi, swap) = if a.0 < b.0 {
            (a.0, b.0, false)
        } else {
            (b.0, a.0, true)
        };
        let (left, right) = self.entries.split_at_mut(hi);
        let first = &mut left[lo].1;
        let second = &mut right[0].1;
        if swap {
            (second, first)
        } else {
            (first, second)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array1<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn set_by_name(&mut self, name: &str, value: Array1<f64>) -> crate::Result<()> {
        let Some(&i) = self.index.get(name) else {
            return Err(crate::LmqError::Checkpoint(format!("unknown buffer {name}")));
        };
        if self.entries[i].1.len() != value.len() {
            return Err(crate::LmqError::Checkpoint(format!(
                "buffer {name} length mismatch"
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// State access for one forward pass: training mutates running statistics
/// through a `RefCell`, evaluation only reads and stays `Sync`-friendly.
pub enum StateAccess<'s> {
    Train(RefCell<&'s mut StateStore>),
    Eval(&'s StateStore),
}

/// Everything a layer needs to run forward once.
pub struct Fwd<'t, 's> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    pub state: StateAccess<'s>,
    pub training: bool,
}

impl<'t, 's> Fwd<'t, 's> {
    pub fn train(tape: &'t Tape, params: &ParamStore, state: &'s mut StateStore) -> Self {
        let vars = params.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
        Fwd {
            tape,
            vars,
            state: StateAccess::Train(RefCell::new(state)),
            training: true,
        }
    }

    pub fn eval(tape: &'t Tape, params: &ParamStore, state: &'s StateStore) -> Self {
        let vars = params.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
        Fwd {
            tape,
            vars,
            state: StateAccess::Eval(state),
            training: false,
        }
    }

    /// The tape leaf holding this parameter's current value.
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients of all parameters after a backward pass, in store order.
    pub fn param_grads(&self, grads: &mut crate::tape::Gradients) -> Vec<Option<Arr>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

// ---- initializers -----------------------------------------------------------

/// He/Kaiming-style normal init scaled by fan-in.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal_sample(rng) * std).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

/// Box-Muller standard normal; two uniforms per sample keeps the stream
/// layout independent of the platform's float rounding.
fn normal_sample(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_counts_scalars() {
        let mut ps = ParamStore::new();
        ps.add("a", zeros(&[3, 4]));
        ps.add("b", zeros(&[7]));
        assert_eq!(ps.count_scalars(), 19);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut ps = ParamStore::new();
        ps.add("w", zeros(&[1]));
        ps.add("w", zeros(&[1]));
    }

    #[test]
    fn pair_mut_borrows_disjoint_buffers() {
        let mut st = StateStore::new();
        let a = st.add("m", Array1::zeros(2));
        let b = st.add("v", Array1::ones(2));
        let (ma, vb) = st.pair_mut(a, b);
        ma[0] = 5.0;
        vb[1] = 7.0;
        assert_eq!(st.get(a)[0], 5.0);
        assert_eq!(st.get(b)[1], 7.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let a = he_normal(&mut r1, &[4, 4], 16);
        let b = he_normal(&mut r2, &[4, 4], 16);
        assert_eq!(a, b);
    }
}
