//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value, its parent
//! nodes and a closure mapping the upstream gradient to parent gradients.
//! Nodes are appended in evaluation order, so walking the node list
//! backwards is a reverse topological order and each node is visited once.

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient to one gradient per parent. The mask says
/// which parents actually need one; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. `backward` is only invoked if some parent needs
    /// a gradient.
    pub fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(value, parents, backward, requires_grad)
    }

    fn insert(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from `output`, seeding it with ones (so a non-scalar
    /// output differentiates the sum of its entries).
    pub fn backward(&self, output: Var) -> Gradients {
        let out = &self.nodes[output.0].value;
        self.backward_with(output, Tensor::filled(out.rows(), out.cols(), 1.0))
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Intermediate gradients are dropped once propagated; leaves keep theirs.
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of every leaf reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros shaped like its value when no path
    /// from the output reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Tensor::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn unreached_leaf_reports_zeros() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        let b = tape.leaf(Tensor::scalar(1.0));
        let y = tape.scale(b, 4.0);
        let g = tape.backward(y);
        assert_eq!(g.get_or_zeros(&tape, a), Tensor::zeros(2, 2));
        assert_eq!(g.get(b).unwrap().item(), 4.0);
    }
}
