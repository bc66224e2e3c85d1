//! Forecasting backbones with a CityCond insertion point.
//!
//! Every traffic backbone takes a normalised window `[L_h, N, d_x]` and
//! returns `[L_f, N, d_x]`; the trajectory model maps `[L_h, 2]` positions to
//! `[L_f, 2]`. CityID conditioning is applied to the raw inputs and the
//! CityMem hook sits after the first block:
//!
//! | kind | hidden state at the hook |
//! |---|---|
//! | gru | `[T, d_h]` after recurrent layer 1 of 2 |
//! | tcn | `[T, d_h]` after dilated block 1 of 4 |
//! | transformer | `[T, B, d_h]` after encoder layer 1 of 4 (`B` node blocks) |
//! | gnn | `[T, N, d_h]` after graph layer 1 |
//! | stgcn | `[T, N, d_h]` after spatio-temporal block 1 |

pub mod graph;
mod sequence;
pub mod spatial;
mod trajectory;
mod transformer;

use serde::{Deserialize, Serialize};

pub use graph::{propagate, Adjacency};

use crate::autodiff::{Tape, Var};
use crate::citycond::{CityCondConfig, CityCondLayer, Conditioned, Variant};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gru,
    Tcn,
    Transformer,
    Gnn,
    Stgcn,
    LstmTraj,
}

impl BackboneKind {
    pub const TRAFFIC: [BackboneKind; 5] = [
        BackboneKind::Gru,
        BackboneKind::Tcn,
        BackboneKind::Transformer,
        BackboneKind::Gnn,
        BackboneKind::Stgcn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Gru => "gru",
            BackboneKind::Tcn => "tcn",
            BackboneKind::Transformer => "transformer",
            BackboneKind::Gnn => "gnn",
            BackboneKind::Stgcn => "stgcn",
            BackboneKind::LstmTraj => "lstm_traj",
        }
    }

    pub fn needs_adjacency(self) -> bool {
        matches!(self, BackboneKind::Gnn | BackboneKind::Stgcn)
    }

    pub fn is_trajectory(self) -> bool {
        self == BackboneKind::LstmTraj
    }

    pub fn supports(self, variant: Variant) -> bool {
        !(self == BackboneKind::LstmTraj && variant == Variant::Citymem)
    }

    fn default_layers(self) -> usize {
        match self {
            BackboneKind::Gru => 2,
            BackboneKind::Tcn => 4,
            BackboneKind::Transformer => 4,
            BackboneKind::Gnn => 2,
            BackboneKind::Stgcn => 2,
            BackboneKind::LstmTraj => 1,
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gru" => BackboneKind::Gru,
            "tcn" => BackboneKind::Tcn,
            "transformer" => BackboneKind::Transformer,
            "gnn" => BackboneKind::Gnn,
            "stgcn" => BackboneKind::Stgcn,
            "lstm_traj" => BackboneKind::LstmTraj,
            other => {
                return Err(Error::config(format!(
                    "unknown backbone {other:?} (gru|tcn|transformer|gnn|stgcn|lstm_traj)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub d_h: usize,
    /// Block count; 0 means the kind's default. GRU is fixed at 2 and the
    /// Transformer at 4.
    pub layers: usize,
    pub heads: usize,
    /// Transformer tokens per time step; `N` must be divisible by it.
    pub node_blocks: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    /// Width of the hidden layer of the output head.
    pub head_hidden: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            kind: BackboneKind::Gru,
            d_h: 64,
            layers: 0,
            heads: 4,
            node_blocks: 1,
            dilations: vec![1, 2, 4, 8],
            kernel: 3,
            head_hidden: 512,
        }
    }
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind) -> Self {
        BackboneSpec {
            kind,
            ..Default::default()
        }
    }

    /// Small widths for tests.
    pub fn tiny(kind: BackboneKind, d_h: usize) -> Self {
        BackboneSpec {
            kind,
            d_h,
            heads: 2,
            head_hidden: 16,
            ..Default::default()
        }
    }

    pub fn layer_count(&self) -> usize {
        match self.kind {
            BackboneKind::Tcn => self.dilations.len(),
            _ if self.layers == 0 => self.kind.default_layers(),
            _ => self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d_h == 0 || self.head_hidden == 0 {
            return fail("d_h and head_hidden must be positive".into());
        }
        let layers = self.layer_count();
        match self.kind {
            BackboneKind::Gru if layers != 2 => {
                fail(format!("gru has exactly 2 layers, got {layers}"))
            }
            BackboneKind::Transformer if layers != 4 => {
                fail(format!("transformer has exactly 4 layers, got {layers}"))
            }
            BackboneKind::Transformer if self.heads == 0 || self.d_h % self.heads != 0 => fail(
                format!("d_h {} not divisible by {} heads", self.d_h, self.heads),
            ),
            BackboneKind::Transformer if self.node_blocks == 0 => {
                fail("node_blocks must be >= 1".into())
            }
            BackboneKind::Tcn if self.dilations.is_empty() || self.dilations.contains(&0) => {
                fail("tcn needs a nonempty list of positive dilations".into())
            }
            BackboneKind::Tcn | BackboneKind::Stgcn if self.kernel == 0 => {
                fail("kernel must be >= 1".into())
            }
            _ if layers == 0 => fail("at least one layer".into()),
            _ => Ok(()),
        }
    }
}

/// Input/output geometry of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub history: usize,
    pub horizon: usize,
    /// `d_x` for traffic, 2 for trajectories.
    pub features: usize,
    /// Node count per city; its length is the number of cities.
    pub nodes: Vec<usize>,
    /// Typical per-step displacement, used to scale trajectory inputs.
    pub position_scale: f64,
}

impl TaskShape {
    pub fn traffic(history: usize, horizon: usize, features: usize, nodes: Vec<usize>) -> Self {
        TaskShape {
            history,
            horizon,
            features,
            nodes,
            position_scale: 1.0,
        }
    }

    pub fn trajectory(history: usize, horizon: usize, cities: usize, position_scale: f64) -> Self {
        TaskShape {
            history,
            horizon,
            features: 2,
            nodes: vec![1; cities],
            position_scale,
        }
    }

    pub fn num_cities(&self) -> usize {
        self.nodes.len()
    }

    /// Sequence backbones flatten all nodes into one vector, so cities with
    /// different `N` get their own input projection and output head. Returns
    /// the distinct node counts and each city's index into them.
    fn io_layout(&self) -> (Vec<usize>, Vec<usize>) {
        if self.nodes.windows(2).all(|w| w[0] == w[1]) {
            (vec![self.nodes[0]], vec![0; self.nodes.len()])
        } else {
            (self.nodes.clone(), (0..self.nodes.len()).collect())
        }
    }

    fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.features == 0 {
            return Err(Error::config(
                "history, horizon and features must be positive",
            ));
        }
        if self.nodes.is_empty() || self.nodes.contains(&0) {
            return Err(Error::config("every city needs at least one node"));
        }
        if !(self.position_scale > 0.0) {
            return Err(Error::config("position_scale must be positive"));
        }
        Ok(())
    }
}

/// Model output for one window.
pub struct Forecast<'t> {
    pub prediction: Var<'t>,
    /// `[T, K]` slot attention when the CityMem hook ran.
    pub attention: Option<Var<'t>>,
}

/// Everything a network needs during one forward pass.
pub(crate) struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub store: &'a ParamStore,
    pub cc: &'a CityCondLayer,
    pub city: usize,
    pub io: usize,
    pub graph: Option<&'a Tensor>,
}

impl<'t> Ctx<'_, 't> {
    pub fn augment(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.cc.augment_input(self.tape, self.store, x, self.city)
    }

    pub fn hook(&self, h: Var<'t>) -> Result<Conditioned<'t>> {
        self.cc.condition(self.tape, self.store, h, self.city)
    }

    /// `P h` over the city graph, or `h` itself with message passing off.
    pub fn propagate(&self, h: Var<'t>) -> Result<Var<'t>> {
        match self.graph {
            Some(p) => propagate(self.tape, p, h),
            None => Ok(h),
        }
    }
}

/// Two-layer ReLU output head, one per input layout.
#[derive(Clone, Debug)]
pub(crate) struct Heads {
    mlps: Vec<Mlp>,
}

impl Heads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        outputs: &[usize],
    ) -> Result<Self> {
        let mlps = outputs
            .iter()
            .enumerate()
            .map(|(k, &out)| {
                let label = if outputs.len() == 1 {
                    name.to_string()
                } else {
                    format!("{name}.{k}")
                };
                Mlp::new(store, &label, (input, hidden, out), Activation::Relu)
            })
            .collect::<Result<_>>()?;
        Ok(Heads { mlps })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        self.mlps[ctx.io].forward(ctx.tape, ctx.store, x)
    }
}

#[derive(Clone, Debug)]
enum Net {
    Gru(sequence::GruNet),
    Tcn(sequence::TcnNet),
    Transformer(transformer::TransformerNet),
    Gnn(spatial::GnnNet),
    Stgcn(spatial::StgcnNet),
    LstmTraj(trajectory::TrajNet),
}

/// A backbone, its CityCond layer and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    spec: BackboneSpec,
    task: TaskShape,
    citycond: CityCondLayer,
    net: Net,
    io: Vec<usize>,
    graphs: Vec<Option<Adjacency>>,
    widening: usize,
}

impl Model {
    pub fn new(
        spec: &BackboneSpec,
        cc: &CityCondConfig,
        task: &TaskShape,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        task.validate()?;
        cc.validate()?;
        if !spec.kind.supports(cc.variant) {
            return Err(Error::UnsupportedVariant(format!(
                "{} does not support {}",
                spec.kind, cc.variant
            )));
        }
        if spec.kind.is_trajectory() && task.features != 2 {
            return Err(Error::config("lstm_traj expects 2-D positions"));
        }
        let mut store = ParamStore::new(seed);
        let citycond = CityCondLayer::new(&mut store, cc, task.num_cities(), spec.d_h)?;
        let extra = citycond.input_extra_dim();
        let (layouts, mut io) = task.io_layout();
        if spec.kind.needs_adjacency() || spec.kind.is_trajectory() {
            // node-shared weights serve every city
            io = vec![0; task.num_cities()];
        }
        let (net, widening) = match spec.kind {
            BackboneKind::Gru => {
                let net = sequence::GruNet::new(&mut store, spec, task, &layouts, extra)?;
                (Net::Gru(net), extra * 3 * spec.d_h * layouts.len())
            }
            BackboneKind::Tcn => {
                let net = sequence::TcnNet::new(&mut store, spec, task, &layouts, extra)?;
                (Net::Tcn(net), extra * spec.d_h * layouts.len())
            }
            BackboneKind::Transformer => {
                let net =
                    transformer::TransformerNet::new(&mut store, spec, task, &layouts, extra)?;
                (Net::Transformer(net), extra * spec.d_h * layouts.len())
            }
            BackboneKind::Gnn => {
                let net = spatial::GnnNet::new(&mut store, spec, task, extra)?;
                (Net::Gnn(net), extra * spec.d_h)
            }
            BackboneKind::Stgcn => {
                let net = spatial::StgcnNet::new(&mut store, spec, task, extra)?;
                (Net::Stgcn(net), extra * spec.d_h)
            }
            BackboneKind::LstmTraj => {
                let net = trajectory::TrajNet::new(&mut store, spec, task, extra)?;
                (Net::LstmTraj(net), 2 * extra * 4 * spec.d_h)
            }
        };
        Ok(Model {
            store,
            spec: spec.clone(),
            task: task.clone(),
            citycond,
            net,
            io,
            graphs: vec![None; task.num_cities()],
            widening,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn task(&self) -> &TaskShape {
        &self.task
    }

    pub fn kind(&self) -> BackboneKind {
        self.spec.kind
    }

    pub fn variant(&self) -> Variant {
        self.citycond.variant()
    }

    pub fn citycond(&self) -> &CityCondLayer {
        &self.citycond
    }

    pub fn set_graph(&mut self, city: usize, adjacency: Adjacency) -> Result<()> {
        let n = *self.task.nodes.get(city).ok_or_else(|| {
            Error::Index(format!(
                "city {city} out of range {}",
                self.task.num_cities()
            ))
        })?;
        if adjacency.nodes() != n {
            return Err(Error::shape(format!(
                "adjacency over {} nodes for city {city} with {n} nodes",
                adjacency.nodes()
            )));
        }
        self.graphs[city] = Some(adjacency);
        Ok(())
    }

    pub fn graph(&self, city: usize) -> Option<&Adjacency> {
        self.graphs.get(city).and_then(Option::as_ref)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Parameters of the CityCond layer itself (embedding, memory, query, gate).
    pub fn citycond_param_count(&self) -> usize {
        self.citycond.param_count()
    }

    /// Input-weight rows that read the appended city embedding.
    pub fn widening_param_count(&self) -> usize {
        self.widening
    }

    /// Forecast for one window using the stored graph of `city`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor, city: usize) -> Result<Forecast<'t>> {
        let graph = if self.spec.kind.needs_adjacency() {
            let adj = self
                .graph(city)
                .ok_or_else(|| Error::contract(format!("no adjacency set for city {city}")))?;
            Some(adj)
        } else {
            None
        };
        self.run(tape, x, city, graph.map(Adjacency::propagation), true)
    }

    /// Forecast with an explicit graph.
    pub fn forward_with_graph<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        city: usize,
        adjacency: &Adjacency,
    ) -> Result<Forecast<'t>> {
        self.run(tape, x, city, Some(adjacency.propagation()), true)
    }

    /// Graph backbones with every propagation step replaced by the identity.
    pub fn forward_without_message_passing<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        city: usize,
    ) -> Result<Forecast<'t>> {
        self.run(tape, x, city, None, false)
    }

    fn run<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        city: usize,
        graph: Option<&Tensor>,
        needs_graph: bool,
    ) -> Result<Forecast<'t>> {
        let io = *self.io.get(city).ok_or_else(|| {
            Error::Index(format!(
                "city {city} out of range {}",
                self.task.num_cities()
            ))
        })?;
        let shape = x.shape();
        if shape.first() != Some(&self.task.history) {
            return Err(Error::contract(format!(
                "window length {:?} but the model expects L_h = {}",
                shape.first(),
                self.task.history
            )));
        }
        if self.spec.kind.is_trajectory() {
            if shape != [self.task.history, 2] {
                return Err(Error::shape(format!(
                    "trajectory input must be [L_h, 2], got {shape:?}"
                )));
            }
        } else if shape.len() != 3 || shape[2] != self.task.features {
            return Err(Error::shape(format!(
                "traffic input must be [L_h, N, {}], got {shape:?}",
                self.task.features
            )));
        } else if !self.spec.kind.needs_adjacency() && shape[1] != self.task.nodes[city] {
            return Err(Error::shape(format!(
                "city {city} has {} nodes, window has {}",
                self.task.nodes[city], shape[1]
            )));
        }
        if needs_graph && self.spec.kind.needs_adjacency() {
            let p = graph.ok_or_else(|| Error::contract("graph backbone without adjacency"))?;
            if p.shape()[0] != shape[1] {
                return Err(Error::shape(format!(
                    "adjacency over {} nodes for a window with {} nodes",
                    p.shape()[0],
                    shape[1]
                )));
            }
        }
        let ctx = Ctx {
            tape,
            store: &self.store,
            cc: &self.citycond,
            city,
            io,
            graph,
        };
        let input = tape.constant(x);
        let (prediction, attention) = match &self.net {
            Net::Gru(n) => n.forward(&ctx, input)?,
            Net::Tcn(n) => n.forward(&ctx, input)?,
            Net::Transformer(n) => n.forward(&ctx, input)?,
            Net::Gnn(n) => n.forward(&ctx, input)?,
            Net::Stgcn(n) => n.forward(&ctx, input)?,
            Net::LstmTraj(n) => (n.forward(&ctx, x)?, None),
        };
        Ok(Forecast {
            prediction,
            attention,
        })
    }
}
