//! Pre-norm Transformer encoder over (time, node-block) tokens.

use super::{BackboneSpec, Ctx, Heads, TaskShape};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(...)`.
pub fn sinusoidal_encoding(steps: usize, dim: usize) -> Result<Tensor> {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for j in 0..dim {
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = t as f64 / freq;
            data[t * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, dim], data)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, 4 * d, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * d, d, true)?,
            heads,
        })
    }

    /// `x: [S, d]`.
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (tape, store) = (ctx.tape, ctx.store);
        let d = x.shape()[1];
        let dk = d / self.heads;
        let qkv = self
            .qkv
            .forward(tape, store, self.norm1.forward(tape, store, x)?)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.narrow(1, h * dk, dk)?;
            let k = qkv.narrow(1, d + h * dk, dk)?;
            let v = qkv.narrow(1, 2 * d + h * dk, dk)?;
            let attn = q.matmul(k.transpose()?)?.scale(scale).softmax()?;
            outs.push(attn.matmul(v)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let x = x.add(self.proj.forward(tape, store, merged)?)?;
        let f = self
            .ff1
            .forward(tape, store, self.norm2.forward(tape, store, x)?)?
            .relu();
        x.add(self.ff2.forward(tape, store, f)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerNet {
    patches: Vec<Linear>,
    block_embedding: Option<ParamId>,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    head: Heads,
    blocks: usize,
    task: TaskShape,
}

impl TransformerNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        layouts: &[usize],
        extra: usize,
    ) -> Result<Self> {
        let d = spec.d_h;
        let b = spec.node_blocks;
        if let Some(n) = layouts.iter().find(|&&n| n % b != 0) {
            return Err(Error::config(format!(
                "{n} nodes cannot be split into {b} blocks"
            )));
        }
        let patches = layouts
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let name = if layouts.len() == 1 {
                    "transformer.patch".to_string()
                } else {
                    format!("transformer.patch.{k}")
                };
                Linear::widened(store, &name, n / b * task.features, extra, d, true)
            })
            .collect::<Result<_>>()?;
        let block_embedding = if b > 1 {
            Some(store.add("transformer.block_embedding", &[b, d], Init::Uniform(0.1))?)
        } else {
            None
        };
        let layers = (0..4)
            .map(|i| {
                EncoderLayer::new(store, &format!("transformer.layer{}", i + 1), d, spec.heads)
            })
            .collect::<Result<_>>()?;
        let outputs: Vec<usize> = layouts
            .iter()
            .map(|n| task.horizon * n * task.features)
            .collect();
        Ok(TransformerNet {
            patches,
            block_embedding,
            positions: sinusoidal_encoding(task.history, d)?.reshape(&[task.history, 1, d])?,
            layers,
            norm: LayerNorm::new(store, "transformer.norm", d)?,
            head: Heads::new(
                store,
                "transformer.head",
                task.history * b * d,
                spec.head_hidden,
                &outputs,
            )?,
            blocks: b,
            task: task.clone(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let (tape, store) = (ctx.tape, ctx.store);
        let s = x.shape();
        let (t, n, b) = (s[0], s[1], self.blocks);
        let tokens = ctx.augment(x.reshape(&[t, b, n / b * s[2]])?)?;
        let mut h = self.patches[ctx.io].forward(tape, store, tokens)?;
        let d = h.shape()[2];
        h = h.add(tape.constant(&self.positions))?;
        if let Some(id) = self.block_embedding {
            h = h.add(tape.param(store, id))?;
        }
        let mut h = h.reshape(&[t * b, d])?;
        let mut attention = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i == 0 {
                let cond = ctx.hook(h.reshape(&[t, b, d])?)?;
                h = cond.hidden.reshape(&[t * b, d])?;
                attention = cond.attention;
            }
        }
        let h = self.norm.forward(tape, store, h)?;
        let y = self.head.forward(ctx, h.reshape(&[1, h.numel()])?)?;
        Ok((
            y.reshape(&[self.task.horizon, n, self.task.features])?,
            attention,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_rows() {
        let pe = sinusoidal_encoding(3, 4).unwrap();
        assert_eq!(pe.data()[..4], [0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]).unwrap() - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[1, 2]).unwrap() - (0.01f64).sin()).abs() < 1e-15);
    }
}
