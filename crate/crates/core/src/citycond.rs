//! The CityCond layer.
//!
//! Three pieces, all attached to a host backbone through two calls:
//!
//! * `augment_input` appends the city embedding `e_c` to every input
//!   feature vector (CityID conditioning).
//! * `condition` is the hidden-state hook. For CityMem it pools the hidden
//!   state over nodes, queries a shared `K x d_m` memory with
//!   `q = phi_q([e_c; h_t])`, reads `m_t = softmax(q M^T) M` and fuses it back
//!   with `h + sigmoid(W_g [h; m]) * (W_m m)`. The output always has the shape
//!   of the input hidden state.
//!
//! `W_m` starts at zero, so a freshly built CityMem layer is the identity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Cityid,
    Citymem,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Cityid, Variant::Citymem];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cityid => "cityid",
            Variant::Citymem => "citymem",
        }
    }

    pub fn uses_city_embedding(self) -> bool {
        !matches!(self, Variant::Base)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "cityid" => Ok(Variant::Cityid),
            "citymem" => Ok(Variant::Citymem),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (base|cityid|citymem)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityCondConfig {
    pub variant: Variant,
    pub d_c: usize,
    pub slots: usize,
    pub d_m: usize,
    pub pooling: Pooling,
    pub use_city_embedding_in_query: bool,
}

impl Default for CityCondConfig {
    fn default() -> Self {
        CityCondConfig {
            variant: Variant::Base,
            d_c: 16,
            slots: 8,
            d_m: 32,
            pooling: Pooling::Mean,
            use_city_embedding_in_query: true,
        }
    }
}

impl CityCondConfig {
    pub fn with_variant(variant: Variant) -> Self {
        CityCondConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Citymem && (self.slots == 0 || self.d_m == 0) {
            return Err(Error::config("citymem needs slots >= 1 and d_m >= 1"));
        }
        Ok(())
    }

    /// Width the city embedding adds to each input feature vector.
    pub fn input_extra_dim(&self) -> usize {
        if self.variant.uses_city_embedding() {
            self.d_c
        } else {
            0
        }
    }

    /// Hidden width of `phi_q`.
    pub fn query_hidden(&self) -> usize {
        self.d_m
    }

    pub fn query_param_count(&self, d_h: usize) -> usize {
        let d_q = self.query_hidden();
        (self.d_c + d_h) * d_q + d_q + d_q * self.d_m + self.d_m
    }

    /// Closed-form parameter count of the layer at a hook of width `d_h`:
    /// `|C| d_c + K d_m + params(phi_q) + (d_h + d_m) d_h + d_m d_h` for CityMem.
    pub fn param_count(&self, num_cities: usize, d_h: usize) -> usize {
        match self.variant {
            Variant::Base => 0,
            Variant::Cityid => num_cities * self.d_c,
            Variant::Citymem => {
                num_cities * self.d_c
                    + self.slots * self.d_m
                    + self.query_param_count(d_h)
                    + (d_h + self.d_m) * d_h
                    + self.d_m * d_h
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CityEmbeddingTable {
    pub table: ParamId,
    pub num_cities: usize,
    pub dim: usize,
}

impl CityEmbeddingTable {
    pub fn lookup<'t>(&self, tape: &'t Tape, store: &ParamStore, city: usize) -> Result<Var<'t>> {
        if city >= self.num_cities {
            return Err(Error::Index(format!(
                "city {city} out of range {}",
                self.num_cities
            )));
        }
        tape.param(store, self.table).embedding(city)
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub memory: ParamId,
    pub slots: usize,
    pub dim: usize,
}

/// `phi_q`: `[e_c; h_t] -> tanh -> d_m`.
#[derive(Clone, Debug)]
pub struct QueryNetwork {
    pub mlp: Mlp,
    pub d_c: usize,
    pub use_city_embedding: bool,
}

impl QueryNetwork {
    /// Queries for a batch of pooled states `h` (`[T, d_h]`). Without the
    /// city embedding its slot in the input is filled with zeros.
    pub fn query<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        e_c: Option<Var<'t>>,
        h: Var<'t>,
    ) -> Result<Var<'t>> {
        let steps = h.shape()[0];
        let input = if self.d_c == 0 {
            h
        } else {
            let city_part = match (self.use_city_embedding, e_c) {
                (true, Some(e)) => e.broadcast_to(&[steps, self.d_c])?,
                (true, None) => return Err(Error::contract("query needs the city embedding")),
                (false, _) => tape.zeros(&[steps, self.d_c])?,
            };
            tape.concat(&[city_part, h], 1)?
        };
        self.mlp.forward(tape, store, input)
    }
}

#[derive(Clone, Debug)]
pub struct FusionGate {
    pub w_g: ParamId,
    pub w_m: ParamId,
}

#[derive(Clone, Debug)]
struct MemoryModules {
    bank: MemoryBank,
    query: QueryNetwork,
    gate: FusionGate,
}

/// Result of the hidden-state hook.
pub struct Conditioned<'t> {
    pub hidden: Var<'t>,
    /// `[T, K]` attention over memory slots (CityMem only).
    pub attention: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct CityCondLayer {
    config: CityCondConfig,
    num_cities: usize,
    d_h: usize,
    table: Option<CityEmbeddingTable>,
    memory: Option<MemoryModules>,
}

pub const PREFIX: &str = "citycond.";

impl CityCondLayer {
    pub fn new(
        store: &mut ParamStore,
        config: &CityCondConfig,
        num_cities: usize,
        d_h: usize,
    ) -> Result<Self> {
        config.validate()?;
        if num_cities == 0 {
            return Err(Error::config("CityCond needs at least one city"));
        }
        let table = if config.variant.uses_city_embedding() && config.d_c > 0 {
            let id = store.add(
                "citycond.city_embedding",
                &[num_cities, config.d_c],
                Init::Uniform(0.1),
            )?;
            Some(CityEmbeddingTable {
                table: id,
                num_cities,
                dim: config.d_c,
            })
        } else {
            None
        };
        let memory = if config.variant == Variant::Citymem {
            let bank = MemoryBank {
                memory: store.add(
                    "citycond.memory",
                    &[config.slots, config.d_m],
                    Init::Uniform(0.1),
                )?,
                slots: config.slots,
                dim: config.d_m,
            };
            let query = QueryNetwork {
                mlp: Mlp::new(
                    store,
                    "citycond.query",
                    (config.d_c + d_h, config.query_hidden(), config.d_m),
                    Activation::Tanh,
                )?,
                d_c: config.d_c,
                use_city_embedding: config.use_city_embedding_in_query,
            };
            let gate = FusionGate {
                w_g: store.add(
                    "citycond.gate.w_g",
                    &[d_h + config.d_m, d_h],
                    Init::FanIn(d_h + config.d_m),
                )?,
                w_m: store.add("citycond.gate.w_m", &[config.d_m, d_h], Init::Zeros)?,
            };
            Some(MemoryModules { bank, query, gate })
        } else {
            None
        };
        Ok(CityCondLayer {
            config: config.clone(),
            num_cities,
            d_h,
            table,
            memory,
        })
    }

    pub fn config(&self) -> &CityCondConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_cities(&self) -> usize {
        self.num_cities
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_h
    }

    pub fn table(&self) -> Option<&CityEmbeddingTable> {
        self.table.as_ref()
    }

    pub fn memory_bank(&self) -> Option<&MemoryBank> {
        self.memory.as_ref().map(|m| &m.bank)
    }

    pub fn fusion_gate(&self) -> Option<&FusionGate> {
        self.memory.as_ref().map(|m| &m.gate)
    }

    pub fn query_network(&self) -> Option<&QueryNetwork> {
        self.memory.as_ref().map(|m| &m.query)
    }

    pub fn input_extra_dim(&self) -> usize {
        self.table.as_ref().map_or(0, |t| t.dim)
    }

    /// Closed-form count; equals the parameters this layer allocated.
    pub fn param_count(&self) -> usize {
        self.config.param_count(self.num_cities, self.d_h)
    }

    fn check_city(&self, city: usize) -> Result<()> {
        if city >= self.num_cities {
            return Err(Error::Index(format!(
                "city {city} out of range {}",
                self.num_cities
            )));
        }
        Ok(())
    }

    pub fn city_embedding<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        city: usize,
    ) -> Result<Option<Var<'t>>> {
        self.check_city(city)?;
        self.table
            .as_ref()
            .map(|t| t.lookup(tape, store, city))
            .transpose()
    }

    /// CityID conditioning of raw inputs; identity for the base variant.
    pub fn augment_input<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        city: usize,
    ) -> Result<Var<'t>> {
        match self.city_embedding(tape, store, city)? {
            Some(e) => cityid_augment(tape, x, e),
            None => Ok(x),
        }
    }

    /// Hidden-state hook. Base and CityID pass `h` through unchanged.
    pub fn condition<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h: Var<'t>,
        city: usize,
    ) -> Result<Conditioned<'t>> {
        self.check_city(city)?;
        let Some(mem) = &self.memory else {
            return Ok(Conditioned {
                hidden: h,
                attention: None,
            });
        };
        let shape = h.shape();
        if shape.last() != Some(&self.d_h) {
            return Err(Error::shape(format!(
                "hook expects hidden width {}, got {shape:?}",
                self.d_h
            )));
        }
        let e_c = self.city_embedding(tape, store, city)?;
        let pooled = pool_hidden(h, self.config.pooling)?;
        let bank = tape.param(store, mem.bank.memory);
        let (readout, alpha) = memory_read(tape, store, e_c, pooled, bank, &mem.query)?;
        let fused = gated_fuse(
            tape,
            h,
            readout,
            tape.param(store, mem.gate.w_g),
            tape.param(store, mem.gate.w_m),
        )?;
        Ok(Conditioned {
            hidden: fused,
            attention: Some(alpha),
        })
    }
}

/// Appends `e_c` to the last axis of `x` at every leading position.
pub fn cityid_augment<'t>(tape: &'t Tape, x: Var<'t>, e_c: Var<'t>) -> Result<Var<'t>> {
    let mut shape = x.shape();
    if shape.is_empty() {
        return Err(Error::shape("cityid_augment needs a trailing feature axis"));
    }
    let e_shape = e_c.shape();
    if e_shape.len() != 1 {
        return Err(Error::shape(format!(
            "city embedding must be a vector, got {e_shape:?}"
        )));
    }
    *shape.last_mut().unwrap() = e_shape[0];
    let e = e_c.broadcast_to(&shape)?;
    tape.concat(&[x, e], shape.len() - 1)
}

/// `[T, N, d_h] -> [T, d_h]` by mean or max over nodes; `[T, d_h]` passes through.
pub fn pool_hidden<'t>(h: Var<'t>, pooling: Pooling) -> Result<Var<'t>> {
    let shape = h.shape();
    match shape.len() {
        1 | 2 => Ok(h),
        3 => match pooling {
            Pooling::Mean => h.mean(1),
            Pooling::Max => h.max(1),
        },
        _ => Err(Error::shape(format!(
            "pool_hidden expects [T, N, d_h] or [T, d_h], got {shape:?}"
        ))),
    }
}

/// Attention readout from the memory bank.
///
/// `h_t` is `[d_h]` or `[T, d_h]`; returns `(m_t, alpha)` with shapes
/// `[d_m]`/`[K]` or `[T, d_m]`/`[T, K]` to match.
pub fn memory_read<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    e_c: Option<Var<'t>>,
    h_t: Var<'t>,
    bank: Var<'t>,
    query: &QueryNetwork,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = h_t.shape();
    let single = shape.len() == 1;
    let h = if single {
        h_t.reshape(&[1, shape[0]])?
    } else {
        h_t
    };
    let q = query.query(tape, store, e_c, h)?;
    let bank_shape = bank.shape();
    if bank_shape.len() != 2 || q.shape()[1] != bank_shape[1] {
        return Err(Error::shape(format!(
            "query {:?} against memory {bank_shape:?}",
            q.shape()
        )));
    }
    let alpha = q.matmul(bank.transpose()?)?.softmax()?;
    let readout = alpha.matmul(bank)?;
    if single {
        Ok((
            readout.reshape(&[bank_shape[1]])?,
            alpha.reshape(&[bank_shape[0]])?,
        ))
    } else {
        Ok((readout, alpha))
    }
}

/// `h + sigmoid([h; m] W_g) * (m W_m)`, with `m` (`[T, d_m]`) broadcast over
/// the node axis of `h` (`[T, N, d_h]` or `[T, d_h]`).
pub fn gated_fuse<'t>(
    tape: &'t Tape,
    h: Var<'t>,
    m: Var<'t>,
    w_g: Var<'t>,
    w_m: Var<'t>,
) -> Result<Var<'t>> {
    let hs = h.shape();
    let ms = m.shape();
    if ms.len() != 2 || hs.len() < 2 || hs[0] != ms[0] {
        return Err(Error::shape(format!(
            "gated_fuse: hidden {hs:?} and readout {ms:?} disagree on time"
        )));
    }
    let d_m = ms[1];
    let m_b = if hs.len() == 3 {
        m.reshape(&[ms[0], 1, d_m])?
            .broadcast_to(&[hs[0], hs[1], d_m])?
    } else {
        m
    };
    let gate = tape.concat(&[h, m_b], hs.len() - 1)?.linear(w_g)?.sigmoid();
    let residual = m_b.linear(w_m)?;
    h.add(gate.mul(residual)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn variant_round_trips_through_strings() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("mem".parse::<Variant>().is_err());
    }

    #[test]
    fn base_layer_has_no_parameters() {
        let mut store = ParamStore::new(1);
        let layer = CityCondLayer::new(&mut store, &CityCondConfig::default(), 2, 8).unwrap();
        assert_eq!(store.count(), 0);
        assert_eq!(layer.param_count(), 0);
    }

    #[test]
    fn cityid_allocates_no_memory() {
        let mut store = ParamStore::new(1);
        let layer = CityCondLayer::new(
            &mut store,
            &CityCondConfig::with_variant(Variant::Cityid),
            3,
            8,
        )
        .unwrap();
        assert!(layer.memory_bank().is_none());
        assert_eq!(store.count(), 3 * 16);
    }

    #[test]
    fn city_index_is_range_checked() {
        let mut store = ParamStore::new(1);
        let layer = CityCondLayer::new(
            &mut store,
            &CityCondConfig::with_variant(Variant::Citymem),
            2,
            4,
        )
        .unwrap();
        let tape = Tape::new();
        let h = tape.zeros(&[3, 4]).unwrap();
        assert!(matches!(
            layer.condition(&tape, &store, h, 2),
            Err(Error::Index(_))
        ));
        let x = tape.zeros(&[3, 1]).unwrap();
        assert!(matches!(
            layer.augment_input(&tape, &store, x, 5),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn gated_fuse_rejects_time_mismatch() {
        let tape = Tape::new();
        let h = tape.zeros(&[4, 2, 3]).unwrap();
        let m = tape.zeros(&[5, 2]).unwrap();
        let wg = tape.zeros(&[5, 3]).unwrap();
        let wm = tape.zeros(&[2, 3]).unwrap();
        assert!(matches!(
            gated_fuse(&tape, h, m, wg, wm),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pool_rejects_zero_nodes_at_construction() {
        assert!(matches!(Tensor::zeros(&[2, 0, 3]), Err(Error::Shape(_))));
    }
}
