//! Reverse-mode autodiff tape.
//!
//! A `Tape` records one forward pass as a flat list of nodes in creation
//! order (which is a topological order, since an op can only reference
//! already-created nodes). `backward` walks the list once in reverse,
//! accumulating gradients. Tapes are per-forward-pass and dropped after use;
//! long-lived parameters live in a [`ParamStore`] and are copied onto the
//! tape as leaves at the start of each step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of one recorded op: given the node's value, its incoming
/// gradient and the parent values, return one gradient buffer per parent
/// (`None` where `needs[i]` is false).
pub trait TapeOp {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    /// Short name used in error messages.
    fn name(&self) -> &'static str;
}

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<Var>,
    pub op: Option<Box<dyn TapeOp>>,
    pub needs_grad: bool,
    /// Populated on leaves with `requires_grad` after `backward`.
    pub grad: Option<Vec<f64>>,
}

/// Identifier of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named long-lived parameter tensors with stable registration order.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let mut t = tensor;
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// One forward pass: op nodes in topological (creation) order plus a
/// multiply-add counter for empirical FLOP accounting.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    macs: u64,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            macs: 0,
            ran_backward: false,
        }
    }

    /// Insert a tensor as a leaf. Gradients flow into it iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push_node(Node {
            value: tensor,
            parents: Vec::new(),
            op: None,
            needs_grad: needs,
            grad: None,
        })
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Bind a stored parameter onto this tape (cached: one leaf per id).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Multiply-adds recorded by every op on this tape so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub(crate) fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        op: Box<dyn TapeOp>,
        macs: u64,
    ) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.add_macs(macs);
        self.push_node(Node {
            value,
            parents,
            op: Some(op),
            needs_grad: needs,
            grad: None,
        })
    }

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` leaf ends
    /// up with `grad = d loss / d leaf`, readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if self.ran_backward {
            return Err(Error::Mode("backward already ran on this tape".into()));
        }
        self.ran_backward = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].op.is_none() {
                // requires_grad leaf
                self.nodes[i].grad = Some(gout);
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let contribs = {
                let node = &self.nodes[i];
                let parent_vals: Vec<&Tensor> =
                    parents.iter().map(|p| &self.nodes[p.0].value).collect();
                node.op
                    .as_ref()
                    .unwrap()
                    .backward(&node.value, &gout, &parent_vals, &needs)
            };
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, c) in parents.iter().zip(contribs) {
                let Some(c) = c else { continue };
                debug_assert_eq!(c.len(), self.nodes[p.0].value.numel());
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Copy accumulated parameter gradients back into the store.
    pub fn collect_param_grads(&self, store: &mut ParamStore) {
        for (id, var) in &self.param_vars {
            store.get_mut(*id).grad = self.nodes[var.0].grad.clone();
        }
    }

    /// Parameters bound on this tape together with their leaf vars.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(id, v)| (*id, *v))
    }
}
