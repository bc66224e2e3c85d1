//! Graph structure and graph convolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nonnegative weights `A` and the propagation matrix `D^-1 (A + I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    weights: Tensor,
    propagation: Tensor,
}

impl Adjacency {
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(format!(
                "adjacency must be square, got {shape:?}"
            )));
        }
        if weights.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::data(
                "adjacency weights must be finite and nonnegative",
            ));
        }
        let n = shape[0];
        let mut p = weights.data().to_vec();
        for i in 0..n {
            p[i * n + i] += 1.0;
            let row = &mut p[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let propagation = Tensor::new(vec![n, n], p)?;
        Ok(Adjacency {
            weights,
            propagation,
        })
    }

    /// No edges: propagation is the identity.
    pub fn identity(n: usize) -> Result<Self> {
        Adjacency::from_weights(Tensor::zeros(&[n, n])?)
    }

    /// Thresholded Gaussian kernel `exp(-d^2 / sigma^2)` on node coordinates;
    /// weights below `threshold` and the diagonal are dropped.
    pub fn gaussian_kernel(coords: &[[f64; 2]], sigma: f64, threshold: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config("gaussian kernel needs sigma > 0"));
        }
        let n = coords.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                let k = (-(dx * dx + dy * dy) / (sigma * sigma)).exp();
                if k >= threshold {
                    w[i * n + j] = k;
                }
            }
        }
        Adjacency::from_weights(Tensor::new(vec![n, n], w)?)
    }

    pub fn nodes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes();
        if perm.len() != n {
            return Err(Error::shape(format!(
                "permutation of length {} for {n} nodes",
                perm.len()
            )));
        }
        let w = self.weights.data();
        let data = (0..n * n)
            .map(|k| w[perm[k / n] * n + perm[k % n]])
            .collect();
        Adjacency::from_weights(Tensor::new(vec![n, n], data)?)
    }
}

/// `P h` applied at every time step of `h: [T, N, d]`.
pub fn propagate<'t>(tape: &'t Tape, p: &Tensor, h: Var<'t>) -> Result<Var<'t>> {
    let s = h.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "propagate expects [T, N, d], got {s:?}"
        )));
    }
    let (t, n, d) = (s[0], s[1], s[2]);
    if p.shape()[0] != n {
        return Err(Error::shape(format!(
            "adjacency over {} nodes applied to {n} nodes",
            p.shape()[0]
        )));
    }
    let node_major = h.permute(&[1, 0, 2])?.reshape(&[n, t * d])?;
    tape.constant(p)
        .matmul(node_major)?
        .reshape(&[n, t, d])?
        .permute(&[1, 0, 2])
}
