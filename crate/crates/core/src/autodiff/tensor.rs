use std::sync::Arc;

/// A dense row-major tensor of `f64` values.
///
/// Cloning is cheap (the buffer is shared). A tensor optionally carries the
/// id of the tape node that produced it; tensors without a node are
/// constants as far as differentiation is concerned.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dims must be positive, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not fill shape {shape:?}",
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// A shape-`[1]` scalar.
    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    /// The same buffer with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(&self, node: usize) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(node),
        }
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    /// Replaces the buffer contents, keeping the shape. Used by optimizers.
    pub fn replace_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len());
        self.data = Arc::new(data);
        self.node = None;
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_shares_storage() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let u = t.clone();
        assert!(Arc::ptr_eq(&t.data, &u.data));
        assert_eq!(t, u);
    }

    #[test]
    #[should_panic]
    fn rejects_mismatched_length() {
        Tensor::new(vec![2, 2], vec![1.0]);
    }

    #[test]
    #[should_panic]
    fn rejects_zero_dim() {
        Tensor::new(vec![0], vec![]);
    }
}
