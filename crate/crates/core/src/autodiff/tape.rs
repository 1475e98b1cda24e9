use super::tensor::Tensor;
use super::AutodiffError;
use std::sync::Arc;

/// Gradient buffers indexed by tape node id, allocated lazily.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    /// The gradient buffer for node `id`, zero-initialized on first access.
    pub fn buf(&mut self, id: usize, len: usize) -> &mut [f64] {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.grads[id].take()
    }
}

/// Gradients of the loss with respect to leaf nodes, returned by
/// [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of a leaf, if any gradient reached it.
    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.grads.get(node).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, node: usize) -> Option<Vec<f64>> {
        self.grads.get_mut(node).and_then(|g| g.take())
    }
}

type BackwardFn = Box<dyn FnOnce(&[f64], &mut GradStore) + Send>;

struct Node {
    len: usize,
    backward: Option<BackwardFn>,
}

/// A gradient tape: an append-only record of operations in topological
/// order. One training step owns one tape; inference can run on a disabled
/// tape, which records nothing.
pub struct Tape {
    nodes: Vec<Node>,
    enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            enabled: true,
        }
    }

    /// A tape that records nothing; every op degrades to a pure forward
    /// computation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter). The returned tensor
    /// shares the input's buffer and carries the new node id.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.enabled {
            return t.detach();
        }
        let id = self.push_node(t.numel(), None);
        t.with_node(id)
    }

    /// Records an op node. `backward` receives the node's output gradient
    /// and accumulates into its parents' buffers. Returns the new node id.
    ///
    /// Callers must only record nodes whose parents already exist on this
    /// tape, which keeps ids topologically ordered.
    pub(crate) fn push_node(&mut self, len: usize, backward: Option<BackwardFn>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { len, backward });
        id
    }

    /// Wraps op output data into a tensor, recording a backward rule when
    /// the tape is enabled and at least one input is attached.
    ///
    /// This is the extension point for ops defined outside this module.
    pub fn record(
        &mut self,
        attached: bool,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        backward: impl FnOnce() -> BackwardFn,
    ) -> Tensor {
        if self.enabled && attached {
            let id = self.push_node(data.len(), Some(backward()));
            Tensor::from_shared(shape, data, Some(id))
        } else {
            Tensor::from_shared(shape, data, None)
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; leaf gradients
    /// are accumulated additively and returned.
    pub fn backward(mut self, loss: &Tensor) -> Result<Gradients, AutodiffError> {
        let loss_id = loss.node().ok_or(AutodiffError::DetachedLoss)?;
        if loss.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut store = GradStore::new(self.nodes.len());
        store.buf(loss_id, 1)[0] = 1.0;
        for id in (0..=loss_id).rev() {
            let node = &mut self.nodes[id];
            if let Some(bw) = node.backward.take() {
                if let Some(g) = store.take(id) {
                    debug_assert_eq!(g.len(), node.len);
                    bw(&g, &mut store);
                }
            }
            // Leaves keep their buffers for collection below.
        }
        Ok(Gradients {
            grads: store.grads,
        })
    }
}

pub(crate) type BoxedBackward = BackwardFn;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_attached_scalar() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(
            tape.backward(&loss),
            Err(AutodiffError::DetachedLoss)
        ));

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn disabled_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = tape.leaf(&Tensor::scalar(3.0));
        assert!(x.node().is_none());
        assert!(tape.is_empty());
    }
}
