//! Dense batch-first tensors.
//!
//! Everything the engine moves around is a [`Tensor`]: a contiguous
//! row-major value buffer plus a shape. Convolutional layers use 4-D
//! `[batch, channels, height, width]`, dense layers 2-D
//! `[batch, features]`. Shapes are validated at layer boundaries, not per
//! element access.

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Batch size, the leading dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes volume",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-D, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Row `b` of a 2-D tensor.
    pub fn row(&self, b: usize) -> &[S] {
        let (_, d) = self.dims2();
        &self.data[b * d..(b + 1) * d]
    }

    pub fn map(mut self, f: impl Fn(S) -> S) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        let r = t.reshaped(&[2, 60]);
        assert_eq!(r.dims2(), (2, 60));
    }

    #[test]
    #[should_panic(expected = "changes volume")]
    fn reshape_rejects_volume_change() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let _ = t.reshaped(&[2, 4]);
    }

    #[test]
    fn row_access() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }
}
