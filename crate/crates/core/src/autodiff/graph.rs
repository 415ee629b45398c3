use super::{AutodiffError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the output adjoint to one adjoint per parent. Receives the parent
/// values, the node's own value and a mask of which parents need a gradient.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant copy of `v`: gradients do not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root with seed adjoint 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            let parent_values: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(upstream, &parent_values, &node.value, &needs);
            for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                match &mut lower[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
