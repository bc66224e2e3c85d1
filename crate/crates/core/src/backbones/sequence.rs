//! GRU and TCN over flattened sensor features.

use super::{BackboneSpec, Ctx, Heads, TaskShape};
use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{GruLayer, Linear};
use crate::params::{Init, ParamId, ParamStore};

type Output<'t> = (Var<'t>, Option<Var<'t>>);

/// `[T, N, d_x] -> [T, N * d_x]`, then the city embedding if any.
fn flatten_input<'t>(ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    ctx.augment(x.reshape(&[s[0], s[1] * s[2]])?)
}

/// `[1, L_f * N * d_x] -> [L_f, N, d_x]`.
fn unflatten_output<'t>(y: Var<'t>, task: &TaskShape, nodes: usize) -> Result<Var<'t>> {
    y.reshape(&[task.horizon, nodes, task.features])
}

#[derive(Clone, Debug)]
pub(crate) struct GruNet {
    first: GruLayer,
    second: GruLayer,
    head: Heads,
    task: TaskShape,
}

impl GruNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        layouts: &[usize],
        extra: usize,
    ) -> Result<Self> {
        let d_h = spec.d_h;
        let widths: Vec<usize> = layouts.iter().map(|n| n * task.features).collect();
        let outputs: Vec<usize> = layouts
            .iter()
            .map(|n| task.horizon * n * task.features)
            .collect();
        Ok(GruNet {
            first: GruLayer::with_inputs(store, "gru.l1", &widths, extra, d_h)?,
            second: GruLayer::new(store, "gru.l2", d_h, 0, d_h)?,
            head: Heads::new(
                store,
                "gru.head",
                task.history * d_h,
                spec.head_hidden,
                &outputs,
            )?,
            task: task.clone(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Output<'t>> {
        let nodes = x.shape()[1];
        let input = flatten_input(ctx, x)?;
        let h1 = self.first.forward(ctx.tape, ctx.store, input, ctx.io)?;
        let cond = ctx.hook(h1)?;
        let h2 = self.second.forward(ctx.tape, ctx.store, cond.hidden, 0)?;
        let flat = h2.reshape(&[1, h2.numel()])?;
        let y = self.head.forward(ctx, flat)?;
        Ok((unflatten_output(y, &self.task, nodes)?, cond.attention))
    }
}

/// One residual block: `h + relu(conv(h) + b)`.
#[derive(Clone, Debug)]
struct TemporalBlock {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

impl TemporalBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d_h: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(TemporalBlock {
            weight: store.add(
                &format!("{name}.w"),
                &[kernel, d_h, d_h],
                Init::FanIn(kernel * d_h),
            )?,
            bias: store.add(&format!("{name}.b"), &[d_h], Init::Zeros)?,
            dilation,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.tape.param(ctx.store, self.weight);
        let b = ctx.tape.param(ctx.store, self.bias);
        h.add(h.conv1d(w, self.dilation)?.add(b)?.relu())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TcnNet {
    inputs: Vec<Linear>,
    blocks: Vec<TemporalBlock>,
    head: Heads,
    task: TaskShape,
}

impl TcnNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        layouts: &[usize],
        extra: usize,
    ) -> Result<Self> {
        let d_h = spec.d_h;
        let inputs = layouts
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let name = if layouts.len() == 1 {
                    "tcn.input".to_string()
                } else {
                    format!("tcn.input.{k}")
                };
                Linear::widened(store, &name, n * task.features, extra, d_h, true)
            })
            .collect::<Result<_>>()?;
        let blocks = spec
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                TemporalBlock::new(store, &format!("tcn.block{}", i + 1), d_h, spec.kernel, d)
            })
            .collect::<Result<_>>()?;
        let outputs: Vec<usize> = layouts
            .iter()
            .map(|n| task.horizon * n * task.features)
            .collect();
        Ok(TcnNet {
            inputs,
            blocks,
            head: Heads::new(
                store,
                "tcn.head",
                task.history * d_h,
                spec.head_hidden,
                &outputs,
            )?,
            task: task.clone(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Output<'t>> {
        let nodes = x.shape()[1];
        let input = flatten_input(ctx, x)?;
        let mut h = self.inputs[ctx.io].forward(ctx.tape, ctx.store, input)?;
        let mut attention = None;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h)?;
            if i == 0 {
                let cond = ctx.hook(h)?;
                h = cond.hidden;
                attention = cond.attention;
            }
        }
        let y = self.head.forward(ctx, h.reshape(&[1, h.numel()])?)?;
        Ok((unflatten_output(y, &self.task, nodes)?, attention))
    }
}
