//! Node-level backbones: a residual GNN and STGCN-lite.

use super::{propagate, BackboneSpec, Ctx, Heads, TaskShape};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

type Output<'t> = (Var<'t>, Option<Var<'t>>);

/// Per-node head: `[T, N, d_h] -> [N, T * d_h] -> [N, L_f * d_x] -> [L_f, N, d_x]`.
fn node_head<'t>(ctx: &Ctx<'_, 't>, head: &Heads, task: &TaskShape, h: Var<'t>) -> Result<Var<'t>> {
    let s = h.shape();
    let (t, n, d) = (s[0], s[1], s[2]);
    let per_node = h.permute(&[1, 0, 2])?.reshape(&[n, t * d])?;
    head.forward(ctx, per_node)?
        .reshape(&[n, task.horizon, task.features])?
        .permute(&[1, 0, 2])
}

/// `h + relu(P h W_n + h W_s + b)`.
#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub neighbour: ParamId,
    pub self_loop: Linear,
}

impl GraphLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(GraphLayer {
            neighbour: store.add(&format!("{name}.w_n"), &[d, d], Init::FanIn(d))?,
            self_loop: Linear::new(store, &format!("{name}.self"), d, d, true)?,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        let p = |id| ctx.tape.param(ctx.store, id);
        let bias = self.self_loop.bias.map(p).expect("graph layer has a bias");
        graph_layer(
            ctx.tape,
            ctx.graph,
            h,
            p(self.neighbour),
            p(self.self_loop.weight),
            bias,
        )
    }
}

/// One residual graph layer on `h: [T, N, d]`; `p = None` skips message
/// passing (`P = I`).
pub fn graph_layer<'t>(
    tape: &'t Tape,
    p: Option<&Tensor>,
    h: Var<'t>,
    w_n: Var<'t>,
    w_s: Var<'t>,
    b: Var<'t>,
) -> Result<Var<'t>> {
    let mixed = match p {
        Some(p) => propagate(tape, p, h)?,
        None => h,
    };
    let msg = mixed.linear(w_n)?;
    let own = h.linear(w_s)?.add(b)?;
    h.add(msg.add(own)?.relu())
}

#[derive(Clone, Debug)]
pub(crate) struct GnnNet {
    input: Linear,
    layers: Vec<GraphLayer>,
    head: Heads,
    task: TaskShape,
}

impl GnnNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        extra: usize,
    ) -> Result<Self> {
        let d = spec.d_h;
        Ok(GnnNet {
            input: Linear::widened(store, "gnn.input", task.features, extra, d, true)?,
            layers: (0..spec.layer_count())
                .map(|i| GraphLayer::new(store, &format!("gnn.layer{}", i + 1), d))
                .collect::<Result<_>>()?,
            head: Heads::new(
                store,
                "gnn.head",
                task.history * d,
                spec.head_hidden,
                &[task.horizon * task.features],
            )?,
            task: task.clone(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Output<'t>> {
        let mut h = self.input.forward(ctx.tape, ctx.store, ctx.augment(x)?)?;
        let mut attention = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i == 0 {
                let cond = ctx.hook(h)?;
                h = cond.hidden;
                attention = cond.attention;
            }
        }
        Ok((node_head(ctx, &self.head, &self.task, h)?, attention))
    }
}

/// Temporal conv, graph conv, temporal conv, with a residual around the block.
#[derive(Clone, Debug)]
struct StBlock {
    tconv1: (ParamId, ParamId),
    graph: (ParamId, ParamId),
    tconv2: (ParamId, ParamId),
}

impl StBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, kernel: usize) -> Result<Self> {
        let mut conv = |part: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(
                    &format!("{name}.{part}.w"),
                    &[kernel, d, d],
                    Init::FanIn(kernel * d),
                )?,
                store.add(&format!("{name}.{part}.b"), &[d], Init::Zeros)?,
            ))
        };
        let tconv1 = conv("tconv1")?;
        let tconv2 = conv("tconv2")?;
        let graph = (
            store.add(&format!("{name}.graph.w"), &[d, d], Init::FanIn(d))?,
            store.add(&format!("{name}.graph.b"), &[d], Init::Zeros)?,
        );
        Ok(StBlock {
            tconv1,
            graph,
            tconv2,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        let p = |id| ctx.tape.param(ctx.store, id);
        let a = h.conv1d(p(self.tconv1.0), 1)?.add(p(self.tconv1.1))?.relu();
        let g = ctx
            .propagate(a)?
            .linear(p(self.graph.0))?
            .add(p(self.graph.1))?
            .relu();
        let b = g.conv1d(p(self.tconv2.0), 1)?.add(p(self.tconv2.1))?.relu();
        h.add(b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct StgcnNet {
    input: Linear,
    blocks: Vec<StBlock>,
    head: Heads,
    task: TaskShape,
}

impl StgcnNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        extra: usize,
    ) -> Result<Self> {
        let d = spec.d_h;
        Ok(StgcnNet {
            input: Linear::widened(store, "stgcn.input", task.features, extra, d, true)?,
            blocks: (0..spec.layer_count())
                .map(|i| StBlock::new(store, &format!("stgcn.block{}", i + 1), d, spec.kernel))
                .collect::<Result<_>>()?,
            head: Heads::new(
                store,
                "stgcn.head",
                task.history * d,
                spec.head_hidden,
                &[task.horizon * task.features],
            )?,
            task: task.clone(),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Output<'t>> {
        let mut h = self.input.forward(ctx.tape, ctx.store, ctx.augment(x)?)?;
        let mut attention = None;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h)?;
            if i == 0 {
                let cond = ctx.hook(h)?;
                h = cond.hidden;
                attention = cond.attention;
            }
        }
        Ok((node_head(ctx, &self.head, &self.task, h)?, attention))
    }
}
