//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! a boxed [`BackwardOp`]. `backward` replays the tape in reverse, pushing
//! adjoints into inputs, and accumulates the results into the `grad` slot of
//! every leaf that was registered with `requires_grad`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;

use super::array::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to a backward rule.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether input `i` needs an adjoint at all.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait BackwardOp<T: Real>: Send + Sync {
    /// Short operation label used by the op counter.
    fn kind(&self) -> &'static str;

    /// Multiply-accumulate operations of the forward pass; zero for ops that
    /// are not products.
    fn macs(&self) -> u64 {
        0
    }

    /// Adjoint for every input, `None` where `ctx.needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

/// Exact multiply-accumulate instrumentation.
///
/// `per_op` is keyed by `scope:kind`, e.g. `enc1.emsm.inplane.attn_map:matmul`.
/// Non-product work (softmax, pooling, interpolation, elementwise) lands in
/// `aux` as output-element counts and never contributes to `mac_count`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mac_count: u64,
    pub per_op: BTreeMap<String, u64>,
    pub aux: BTreeMap<String, u64>,
}

impl OpCounter {
    pub fn record_macs(&mut self, label: String, n: u64) {
        self.mac_count += n;
        *self.per_op.entry(label).or_default() += n;
    }

    pub fn record_aux(&mut self, label: String, n: u64) {
        *self.aux.entry(label).or_default() += n;
    }

    /// Sum of MACs whose label starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.per_op
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    needs_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    counter: OpCounter,
    scopes: Vec<String>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), counter: OpCounter::default(), scopes: Vec::new(), check_finite: true }
    }

    /// Disables the after-every-op finiteness check.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            needs_grad: requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn reset_counter(&mut self) {
        self.counter = OpCounter::default();
    }

    /// Runs `f` with `name` appended to the current label scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scopes.push(name.to_string());
        let out = f(self);
        self.scopes.pop();
        out
    }

    pub fn label(&self, kind: &str) -> String {
        if self.scopes.is_empty() {
            kind.to_string()
        } else {
            format!("{}:{kind}", self.scopes.join("."))
        }
    }

    /// Records an operation's output. Used by every op constructor.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var> {
        let kind = op.kind();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: self.label(kind) });
        }
        let macs = op.macs();
        if macs > 0 {
            let label = self.label(kind);
            self.counter.record_macs(label, macs);
        } else {
            let label = self.label(kind);
            self.counter.record_aux(label, value.numel() as u64);
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            needs_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: Some(Box::new(op)),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a single-element `loss`, accumulating into the
    /// `grad` of every `requires_grad` leaf. Calling it twice adds twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.is_none() {
                if node.requires_grad {
                    adj[i] = Some(g);
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect(),
            };
            let grads = node.op.as_ref().expect("op node").backward(&ctx, &g);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (&j, gj) in node.inputs.iter().zip(grads) {
                let Some(gj) = gj else { continue };
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut adj[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        for (i, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => {
                    *slot = Some(Tensor::new(node.value.shape(), g)?);
                }
            }
        }
        Ok(())
    }
}
