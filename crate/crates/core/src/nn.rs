//! Small parameterised building blocks shared by the backbones.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        Linear::widened(store, name, in_dim, 0, out_dim, bias)
    }

    /// Linear map on `in_dim + extra_in` inputs whose last `extra_in` weight
    /// rows start at zero. Used where a city embedding is appended to the
    /// input: the layer then computes exactly what the unconditioned layer
    /// would until training moves those rows.
    pub fn widened(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        extra_in: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_widened(
            &format!("{name}.w"),
            in_dim,
            extra_in,
            out_dim,
            Init::FanIn(in_dim),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.b"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim: in_dim + extra_in,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.linear(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Self::EPS)?
            .mul(tape.param(store, self.gain))?
            .add(tape.param(store, self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        let (input, hidden, output) = dims;
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, true)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, output, true)?,
            activation,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.activation.apply(self.hidden.forward(tape, store, x)?);
        self.out.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }
}

/// Gated recurrent unit over a `[T, d_in]` sequence.
///
/// The input projection may come in several versions (one per input
/// layout); all share the recurrent weights.
#[derive(Clone, Debug)]
pub struct GruLayer {
    inputs: Vec<Linear>,
    recurrent: Linear,
    hidden: usize,
}

impl GruLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        extra_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        GruLayer::with_inputs(store, name, &[d_in], extra_in, hidden)
    }

    /// One input projection per entry of `d_ins`, named `{name}.input` when
    /// there is only one and `{name}.input.{k}` otherwise.
    pub fn with_inputs(
        store: &mut ParamStore,
        name: &str,
        d_ins: &[usize],
        extra_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let inputs = d_ins
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let label = if d_ins.len() == 1 {
                    format!("{name}.input")
                } else {
                    format!("{name}.input.{k}")
                };
                Linear::widened(store, &label, d, extra_in, 3 * hidden, true)
            })
            .collect::<Result<_>>()?;
        Ok(GruLayer {
            inputs,
            recurrent: Linear::new(
                store,
                &format!("{name}.recurrent"),
                hidden,
                3 * hidden,
                true,
            )?,
            hidden,
        })
    }

    /// Hidden state at every step, `[T, hidden]`, starting from zeros.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        xs: Var<'t>,
        input: usize,
    ) -> Result<Var<'t>> {
        let shape = xs.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "GRU expects [T, d_in], got {shape:?}"
            )));
        }
        let proj = self.inputs.get(input).ok_or_else(|| {
            Error::Index(format!(
                "GRU input projection {input} of {}",
                self.inputs.len()
            ))
        })?;
        let hd = self.hidden;
        let gates_x = proj.forward(tape, store, xs)?;
        let mut h = tape.zeros(&[1, hd])?;
        let mut states = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            let gx = gates_x.narrow(0, t, 1)?;
            let gh = self.recurrent.forward(tape, store, h)?;
            let r = gx.narrow(1, 0, hd)?.add(gh.narrow(1, 0, hd)?)?.sigmoid();
            let z = gx.narrow(1, hd, hd)?.add(gh.narrow(1, hd, hd)?)?.sigmoid();
            let n = gx
                .narrow(1, 2 * hd, hd)?
                .add(r.mul(gh.narrow(1, 2 * hd, hd)?)?)?
                .tanh();
            // h' = (1 - z) * n + z * h
            h = n.add(z.mul(h.sub(n)?)?)?;
            states.push(h);
        }
        tape.concat(&states, 0)
    }

    pub fn param_count(&self) -> usize {
        self.inputs.iter().map(Linear::param_count).sum::<usize>() + self.recurrent.param_count()
    }
}

/// Single LSTM cell; gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        extra_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let cell = LstmCell {
            input: Linear::widened(
                store,
                &format!("{name}.input"),
                d_in,
                extra_in,
                4 * hidden,
                true,
            )?,
            recurrent: Linear::new(
                store,
                &format!("{name}.recurrent"),
                hidden,
                4 * hidden,
                false,
            )?,
            hidden,
        };
        // forget-gate bias starts at 1
        let b = cell.input.bias.expect("lstm input has a bias");
        store.tensor_mut(b).data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(cell)
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape) -> Result<LstmState<'t>> {
        Ok(LstmState {
            h: tape.zeros(&[1, self.hidden])?,
            c: tape.zeros(&[1, self.hidden])?,
        })
    }

    /// One step on a `[1, d_in]` input.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        state: &LstmState<'t>,
    ) -> Result<LstmState<'t>> {
        let hd = self.hidden;
        let gates = self
            .input
            .forward(tape, store, x)?
            .add(self.recurrent.forward(tape, store, state.h)?)?;
        let i = gates.narrow(1, 0, hd)?.sigmoid();
        let f = gates.narrow(1, hd, hd)?.sigmoid();
        let g = gates.narrow(1, 2 * hd, hd)?.tanh();
        let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { h, c })
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count() + self.recurrent.param_count()
    }
}
