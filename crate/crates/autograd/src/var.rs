//! Graph nodes and the reverse sweep.
//!
//! Every backward rule is written with differentiable [`Var`] operations, so a
//! gradient computed with `create_graph = true` is itself a node of the graph
//! and can be differentiated again. That is what makes bilevel (second-order)
//! meta-gradients exact rather than approximated.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::tensor::Tensor;
use crate::AutogradError;

pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each parent given the gradient `g` of the output.
    /// `None` means the contribution is identically zero.
    /// `needs[i]` tells whether parent `i` wants a gradient at all.
    fn backward(&self, g: &Var, parents: &[Var], out: &Var, needs: &[bool]) -> Vec<Option<Var>>;
}

struct GradFn {
    parents: Vec<Var>,
    op: Box<dyn Backward>,
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A tensor value together with the recipe that produced it.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.op.name()).unwrap_or("leaf");
        write!(f, "Var({op}, requires_grad={}, {:?})", self.0.requires_grad, self.0.value)
    }
}

impl Var {
    /// A value that is never differentiated.
    pub fn constant(value: Tensor) -> Self {
        Self(Arc::new(Node { value: Arc::new(value), requires_grad: false, grad_fn: None }))
    }

    /// A differentiable leaf (a parameter).
    pub fn leaf(value: Tensor) -> Self {
        Self(Arc::new(Node { value: Arc::new(value), requires_grad: true, grad_fn: None }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, op: impl Backward + 'static) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self(Arc::new(Node {
                value: Arc::new(value),
                requires_grad: true,
                grad_fn: Some(GradFn { parents, op: Box::new(op) }),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Self(Arc::new(Node { value: Arc::clone(&self.0.value), requires_grad: false, grad_fn: None }))
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients carry their own graph and can be
/// differentiated again; otherwise they are constants. Inputs that `root`
/// does not depend on receive zeros.
pub fn grad(root: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, AutogradError> {
    if root.value().numel() != 1 {
        return Err(AutogradError::NonScalarRoot(root.shape().to_vec()));
    }
    let zeros = |v: &Var| Var::constant(Tensor::zeros(v.shape()));
    if !root.requires_grad() {
        return Ok(wrt.iter().map(zeros).collect());
    }

    let order = topo_order(root);
    let keep: HashSet<usize> = wrt.iter().map(Var::key).collect();
    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(root.key(), Var::constant(Tensor::ones(root.shape())));

    for node in order.iter().rev() {
        let Some(gf) = node.0.grad_fn.as_ref() else { continue };
        let g = if keep.contains(&node.key()) {
            match grads.get(&node.key()) {
                Some(g) => g.clone(),
                None => continue,
            }
        } else {
            match grads.remove(&node.key()) {
                Some(g) => g,
                None => continue,
            }
        };
        let needs: Vec<bool> = gf.parents.iter().map(Var::requires_grad).collect();
        let parent_grads = if create_graph {
            gf.op.backward(&g, &gf.parents, node, &needs)
        } else {
            let detached: Vec<Var> = gf.parents.iter().map(Var::detach).collect();
            gf.op.backward(&g.detach(), &detached, &node.detach(), &needs)
        };
        debug_assert_eq!(parent_grads.len(), gf.parents.len());
        for (parent, pg) in gf.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape from {}", gf.op.name());
            let entry = grads.remove(&parent.key());
            let acc = match entry {
                Some(prev) => crate::ops::add(&prev, &pg),
                None => pg,
            };
            grads.insert(parent.key(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|v| {
            let g = grads.get(&v.key()).cloned().unwrap_or_else(|| zeros(v));
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect())
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.key()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = v.0.grad_fn.as_ref() {
            for p in gf.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
