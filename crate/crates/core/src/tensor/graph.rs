use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// What a backward closure gets to see.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<(u32, usize)>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Leaf whose gradient is wanted (e.g. an input image for R1).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// Parameter leaf. Frozen parameters enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        self.push(Node {
            value: store.get(id).clone(),
            requires_grad: trainable,
            parents: Vec::new(),
            backward: None,
            param: trainable.then_some((store.tag, id.0)),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an operation. The backward closure is dropped when no input
    /// requires a gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
        })
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar");
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(out).numel());
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.len(), self.nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.backward.is_some() {
                grads[i] = None;
            }
        }
        Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<(u32, usize)>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Summed gradients for every parameter of `store`, zero where unused.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some((tag, idx))) = (g, p) {
                if *tag == store.tag {
                    out[*idx].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        out
    }
}
