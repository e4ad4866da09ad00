use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient of each parent given (parents, output data, output gradient).
pub(crate) type BackwardFn =
    Box<dyn Fn(&[Tensor], &ArrayD<f64>, &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> + Send + Sync>;

pub(crate) struct Node {
    id: u64,
    data: ArrayD<f64>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// An immutable f64 tensor participating in an autodiff graph.
///
/// Cloning is cheap (`Arc`). Tensors are `Send + Sync`; forward passes may be
/// evaluated from multiple threads, mutation does not exist.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    /// Constant leaf: no gradient is ever tracked through it.
    pub fn from_array(data: ArrayD<f64>) -> Self {
        Self::leaf(data, false)
    }

    /// Differentiable leaf: `backward` reports a gradient for it.
    pub fn var(data: ArrayD<f64>) -> Self {
        Self::leaf(data, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_array(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "from_vec: {} values for shape {shape:?}", data.len());
        Self::from_array(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_array(ArrayD::zeros(IxDyn(shape)))
    }

    fn leaf(data: ArrayD<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    /// Interior node. When no parent requires a gradient the parents are
    /// dropped so inference-mode forwards never retain a graph.
    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Self::leaf(data, false);
        }
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            parents,
            backward: Some(backward),
            requires_grad,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn dims(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn elem_count(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.elem_count(), 1, "item() on tensor of shape {:?}", self.dims());
        *self.0.data.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.iter().copied().collect()
    }

    /// Same data, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), false)
    }

    pub fn has_nan(&self) -> bool {
        self.0.data.iter().any(|v| !v.is_finite())
    }

    /// Reverse-mode gradients of `self` (summed over all its elements, i.e.
    /// seeded with ones) with respect to every `var` leaf in its history.
    pub fn backward(&self) -> Grads {
        let order = self.topo_order();
        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        grads.insert(self.0.id, ArrayD::from_elem(self.0.data.raw_dim(), 1.0));
        for node in order.iter().rev() {
            let Some(grad) = grads.get(&node.0.id).cloned() else {
                continue;
            };
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let parent_grads = backward(&node.0.parents, &node.0.data, &grad);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    parent.dims(),
                    "gradient shape mismatch for parent of {:?}",
                    node.dims()
                );
                match grads.entry(parent.0.id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &pg;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
            if !node.0.parents.is_empty() {
                grads.remove(&node.0.id);
            }
        }
        Grads(grads)
    }

    /// Post-order (parents before children) over the grad-requiring subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative DFS; the graph can be deep for long conv stacks.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if child.0.requires_grad && seen.insert(child.0.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.dims())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Result of [`Tensor::backward`]: gradients keyed by tensor id.
pub struct Grads(HashMap<u64, ArrayD<f64>>);

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.0.get(&t.id())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<ArrayD<f64>> {
        self.0.remove(&t.id())
    }
}
