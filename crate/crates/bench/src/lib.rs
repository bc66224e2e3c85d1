//! Shared fixtures for the benchmarks.

use citycond::engine::{ExperimentConfig, Metrics, RunResult};
use citycond::{
    Adjacency, BackboneKind, BackboneSpec, CityCondConfig, Model, TaskShape, Tensor, Variant,
};

/// Nodes in the benchmark graph.
pub const NODES: usize = 20;

/// A two-city traffic model with a ring graph in both cities.
pub fn traffic_model(kind: BackboneKind, variant: Variant, d_h: usize) -> Model {
    let task = TaskShape::traffic(12, 12, 1, vec![NODES, NODES]);
    let mut model = Model::new(
        &BackboneSpec::tiny(kind, d_h),
        &CityCondConfig::with_variant(variant),
        &task,
        7,
    )
    .expect("valid model");
    if kind.needs_adjacency() {
        for city in 0..2 {
            model.set_graph(city, ring()).expect("graph fits");
        }
    }
    model
}

fn ring() -> Adjacency {
    let mut w = vec![0.0; NODES * NODES];
    for i in 0..NODES {
        let j = (i + 1) % NODES;
        w[i * NODES + j] = 1.0;
        w[j * NODES + i] = 1.0;
    }
    Adjacency::from_weights(Tensor::new(vec![NODES, NODES], w).expect("square"))
        .expect("valid graph")
}

/// A deterministic `[12, NODES, 1]` input.
pub fn traffic_input() -> Tensor {
    let data = (0..12 * NODES).map(|i| (i as f64 * 0.37).sin()).collect();
    Tensor::new(vec![12, NODES, 1], data).expect("shape matches")
}

/// `backbones x variants x seeds` results with a synthetic test MSE.
pub fn fake_results(backbones: &[BackboneKind], seeds: u64) -> Vec<RunResult> {
    let mut out = Vec::new();
    for &kind in backbones {
        for variant in Variant::ALL {
            for seed in 0..seeds {
                let mut cfg = ExperimentConfig::default();
                cfg.backbone.kind = kind;
                cfg.citycond.variant = variant;
                cfg.seed = seed;
                let mut r = RunResult::new(&cfg);
                let mse = 1.0 + (seed as f64 * 0.61).fract();
                r.test = Some(Metrics {
                    mse: Some(mse),
                    mae: Some(mse.sqrt()),
                    windows: 1,
                    ..Metrics::default()
                });
                out.push(r);
            }
        }
    }
    out
}
