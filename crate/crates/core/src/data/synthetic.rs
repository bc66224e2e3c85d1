//! Synthetic multi-city traffic with known shared structure.
//!
//! Each city mixes the same daily motifs with its own weights:
//!
//! `x_c(t, i) = level + amplitude * lambda_i * sum_s w_{c,s} motif_s(t)`,
//! then spatial smoothing `(1 - beta) x + beta P_c x` over the city graph,
//! plus a slow city-specific sinusoid and Gaussian noise. The node loadings
//! `lambda` are shared by all cities; the motif shapes, weights and city
//! components are returned as [`GroundTruth`].

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CitySeries;
use crate::backbones::Adjacency;
use crate::error::{Error, Result};
use crate::params::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub cities: usize,
    pub nodes: usize,
    pub steps: usize,
    pub motifs: usize,
    /// Steps per simulated day.
    pub period: usize,
    pub level: f64,
    pub amplitude: f64,
    /// Spread of the per-city motif weights: `w = max(0, 1 + h * U(-1, 1))`.
    pub heterogeneity: f64,
    /// Every city reuses city 0's motif weights.
    pub share_weights: bool,
    /// Spread of the shared node loadings: `lambda = 1 + j * U(-1, 1)`.
    pub node_jitter: f64,
    /// Amplitude of the slow city-specific sinusoid.
    pub city_amplitude: f64,
    pub noise_std: f64,
    /// `beta` in the smoothing step; 0 disables it.
    pub diffusion: f64,
    pub graph_sigma: f64,
    pub graph_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            cities: 2,
            nodes: 20,
            steps: 2000,
            motifs: 3,
            period: 96,
            level: 60.0,
            amplitude: 10.0,
            heterogeneity: 0.8,
            share_weights: false,
            node_jitter: 0.3,
            city_amplitude: 3.0,
            noise_std: 1.0,
            diffusion: 0.5,
            graph_sigma: 0.3,
            graph_threshold: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synthetic spec: {m}")));
        if self.cities == 0 || self.nodes == 0 || self.steps == 0 || self.motifs == 0 {
            return bad("cities, nodes, steps and motifs must be positive");
        }
        if self.period < 2 {
            return bad("period must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.diffusion) {
            return bad("diffusion must lie in [0, 1]");
        }
        let finite = [
            self.level,
            self.amplitude,
            self.heterogeneity,
            self.node_jitter,
            self.city_amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite()) || !(self.noise_std >= 0.0) {
            return bad("parameters must be finite and noise_std >= 0");
        }
        if !(self.graph_sigma > 0.0) {
            return bad("graph_sigma must be positive");
        }
        Ok(())
    }
}

/// Motif `s` at day phase `phase` in `[0, 1)`.
pub fn motif(s: usize, phase: f64) -> f64 {
    let bump = |centre: f64, width: f64| {
        let d = (phase - centre) / width;
        -(-d * d).exp()
    };
    match s {
        0 => (TAU * phase).sin(),
        1 => bump(0.33, 0.035),
        2 => bump(0.73, 0.045),
        k => (TAU * (k - 1) as f64 * phase + k as f64).sin(),
    }
}

pub fn motif_name(s: usize) -> String {
    match s {
        0 => "daily".into(),
        1 => "morning_rush".into(),
        2 => "evening_rush".into(),
        k => format!("harmonic_{}", k - 1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityTruth {
    pub name: String,
    pub weights: Vec<f64>,
    pub low_freq_amplitude: f64,
    pub low_freq_period: f64,
    pub low_freq_phase: f64,
    pub coordinates: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub period: usize,
    pub motif_names: Vec<String>,
    /// One period of each motif.
    pub motifs: Vec<Vec<f64>>,
    pub node_loadings: Vec<f64>,
    pub cities: Vec<CityTruth>,
}

pub fn city_name(c: usize) -> String {
    if c < 26 {
        char::from(b'A' + c as u8).to_string()
    } else {
        format!("C{c}")
    }
}

/// Generates every city; bit-identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<CitySeries>, GroundTruth)> {
    spec.validate()?;
    let (n, t_len, p) = (spec.nodes, spec.steps, spec.period);
    let phase = |t: usize| (t % p) as f64 / p as f64;
    let motifs: Vec<Vec<f64>> = (0..spec.motifs)
        .map(|s| (0..p).map(|t| motif(s, phase(t))).collect())
        .collect();

    let mut rng = stream(spec.seed, "synthetic/nodes");
    let loadings: Vec<f64> = (0..n)
        .map(|_| 1.0 + spec.node_jitter * rng.random_range(-1.0..=1.0))
        .collect();

    let draw_weights = |c: usize| -> Vec<f64> {
        let mut rng = stream(spec.seed, &format!("synthetic/weights/{c}"));
        (0..spec.motifs)
            .map(|_| (1.0 + spec.heterogeneity * rng.random_range(-1.0..=1.0)).max(0.0))
            .collect()
    };

    let mut series = Vec::with_capacity(spec.cities);
    let mut truths = Vec::with_capacity(spec.cities);
    for c in 0..spec.cities {
        let name = city_name(c);
        let weights = draw_weights(if spec.share_weights { 0 } else { c });
        let mut rng = stream(spec.seed, &format!("synthetic/city/{c}"));
        let low_freq_period = p as f64 * rng.random_range(3.0..7.0);
        let low_freq_phase = rng.random_range(0.0..TAU);
        let coordinates: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let adjacency =
            Adjacency::gaussian_kernel(&coordinates, spec.graph_sigma, spec.graph_threshold)?;

        let shared: Vec<f64> = (0..p)
            .map(|k| weights.iter().zip(&motifs).map(|(w, m)| w * m[k]).sum())
            .collect();
        let mut values = vec![0.0; t_len * n];
        for t in 0..t_len {
            let row = &mut values[t * n..(t + 1) * n];
            for (v, lam) in row.iter_mut().zip(&loadings) {
                *v = spec.amplitude * lam * shared[t % p];
            }
        }
        if spec.diffusion > 0.0 {
            let prop = adjacency.propagation().data();
            let beta = spec.diffusion;
            for row in values.chunks_mut(n) {
                let old = row.to_vec();
                for (i, v) in row.iter_mut().enumerate() {
                    let mixed: f64 = (0..n).map(|j| prop[i * n + j] * old[j]).sum();
                    *v = (1.0 - beta) * old[i] + beta * mixed;
                }
            }
        }
        let mut noise_rng = stream(spec.seed, &format!("synthetic/noise/{c}"));
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for t in 0..t_len {
            let slow =
                spec.city_amplitude * (TAU * t as f64 / low_freq_period + low_freq_phase).sin();
            for v in &mut values[t * n..(t + 1) * n] {
                *v += spec.level + slow;
                if spec.noise_std > 0.0 {
                    *v += normal.sample(&mut noise_rng);
                }
            }
        }
        let mut s = CitySeries::new(c, &name, Tensor::new(vec![t_len, n, 1], values)?)?;
        s.adjacency = Some(adjacency);
        series.push(s);
        truths.push(CityTruth {
            name,
            weights,
            low_freq_amplitude: spec.city_amplitude,
            low_freq_period,
            low_freq_phase,
            coordinates,
        });
    }
    let truth = GroundTruth {
        period: p,
        motif_names: (0..spec.motifs).map(motif_name).collect(),
        motifs,
        node_loadings: loadings,
        cities: truths,
    };
    Ok((series, truth))
}
