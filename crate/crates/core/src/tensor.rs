//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: it owns its data and, when it takes part in
//! training, a gradient buffer of the same shape. Graph construction lives in
//! [`crate::autodiff`]; tensors enter a graph as leaves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "shape {shape:?} has a zero-sized dimension at axis {pos}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from row slices; all rows must have the same length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows in matrix literal"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(shape.to_vec(), self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(Error::Index(format!(
                    "index {i} out of range {d} on axis {axis}"
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn at(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Copy of the `index`-th slice along axis 0.
    pub fn slice0(&self, index: usize) -> Result<Tensor> {
        let (&first, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("slice0 on a scalar"))?;
        if index >= first {
            return Err(Error::Index(format!("slice {index} out of range {first}")));
        }
        let inner = numel(rest);
        let shape = if rest.is_empty() {
            Vec::new()
        } else {
            rest.to_vec()
        };
        Ok(Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Concatenates equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::shape("stack requires equal shapes"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_detected() {
        let t = Tensor::vector(&[1.0, f64::NAN]).unwrap();
        assert!(!t.is_finite());
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2, 3]).unwrap(), 23.0);
        assert_eq!(t.at(&[0, 1, 0]).unwrap(), 4.0);
        assert!(t.at(&[2, 0, 0]).is_err());
        assert_eq!(t.slice0(1).unwrap().data()[0], 12.0);
    }
}
