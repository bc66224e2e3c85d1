//! Named trainable parameters and their deterministic initialisation.
//!
//! Every parameter draws its initial values from its own ChaCha stream keyed
//! by `(seed, name)`. Adding or removing a parameter therefore never shifts
//! the values of any other parameter, which is what lets the base, CityID and
//! CityMem variants of one backbone start from identical backbone weights.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

/// Initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
}

/// Identity of one store instance; clones get a fresh one.
#[derive(Debug, PartialEq, Eq, Hash)]
pub(crate) struct StoreKey(u64);

impl StoreKey {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        StoreKey(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

impl Default for StoreKey {
    fn default() -> Self {
        StoreKey::fresh()
    }
}

impl Clone for StoreKey {
    fn clone(&self) -> Self {
        StoreKey::fresh()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    #[serde(skip)]
    key: StoreKey,
}

/// FNV-1a, used only to derive per-parameter seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with a label into an independent stream seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut z = seed ^ fnv1a(label.as_bytes()).rotate_left(17);
    // splitmix64 finaliser
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

fn sample(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            key: StoreKey::fresh(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let n = shape.iter().product();
        let mut rng = stream(self.seed, name);
        let tensor = Tensor::new(shape.to_vec(), sample(init, n, &mut rng))?;
        Ok(self.push(name, tensor))
    }

    /// A `[rows + extra_rows, cols]` matrix whose first `rows` rows are drawn
    /// exactly as `add(name, [rows, cols], init)` would, followed by
    /// `extra_rows` zero rows.
    pub fn add_widened(
        &mut self,
        name: &str,
        rows: usize,
        extra_rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let mut rng = stream(self.seed, name);
        let mut data = sample(init, rows * cols, &mut rng);
        data.resize((rows + extra_rows) * cols, 0.0);
        let tensor = Tensor::new(vec![rows + extra_rows, cols], data)?;
        Ok(self.push(name, tensor))
    }

    fn push(&mut self, name: &str, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn key(&self) -> u64 {
        self.key.0
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Drops every gradient buffer, so untouched parameters read as `None`.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Marks parameters whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copies parameter values out of `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::contract("parameter stores have different layouts"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::contract(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.tensor.data().to_vec())
            .collect()
    }

    pub fn set_values(&mut self, values: &[Vec<f64>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor.data_mut().copy_from_slice(v);
        }
    }
}
