//! Dense row-major tensors.
//!
//! A `Tensor` is an immutable value: the buffer lives behind an `Arc`, so
//! clones are cheap and tensors can be shared across threads. Gradient
//! tracking is opt-in via [`crate::tape::Tape::watch`]; a tensor with no
//! node id never receives a gradient.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tape::NodeId;

#[derive(Clone, Debug)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    pub(crate) node: Option<NodeId>,
}

impl<F: Scalar> Tensor<F> {
    /// Build from a flat row-major buffer. Panics if `shape` does not
    /// account for every element.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "tensor shape {:?} wants {} elements, buffer has {}",
            shape,
            expect,
            data.len()
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![F::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[F] {
        assert_eq!(self.rank(), 2, "row() on tensor of shape {:?}", self.shape);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(expect, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: Arc::clone(&self.data), node: self.node }
    }

    /// Detached copy: same shape and data, no tape node.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Lossy element-type conversion (used by the f64 gradcheck mode).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        self.map(|v| G::cast_from(v.cast_f64()))
    }
}

impl<F: Scalar> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accounts_for_every_element() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dim(1), 3);
    }

    #[test]
    #[should_panic(expected = "wants 6 elements")]
    fn mismatched_buffer_rejected() {
        let _ = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.reshaped(vec![4]);
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
