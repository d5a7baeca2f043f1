use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Range, Sub};

use super::{sigmoid, softplus, Ops, Real};
use crate::conditioner::ConditionerNet;
use crate::error::{Result, VcnfError};

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf,
    Param(u32),
    Unary { a: u32, da: f64 },
    Binary { a: u32, b: u32, da: f64, db: f64 },
    /// Marks a dense block; its outputs are the `n_out` leaf nodes that follow.
    Block(u32),
}

#[derive(Debug, Clone)]
struct BlockRecord {
    net: ConditionerNet,
    inputs: Range<usize>,
    cache: Range<usize>,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    values: Vec<f64>,
    blocks: Vec<BlockRecord>,
    links: Vec<u32>,
    arena: Vec<f64>,
    adj: Vec<f64>,
    nonfinite: Option<&'static str>,
}

impl Inner {
    #[inline]
    fn push(&mut self, node: Node, value: f64, primitive: &'static str) -> u32 {
        if !value.is_finite() && self.nonfinite.is_none() {
            self.nonfinite = Some(primitive);
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(node);
        self.values.push(value);
        idx
    }
}

/// Reverse-mode tape. Cleared and reused between samples.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("blocks", &inner.blocks.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.values.clear();
        inner.blocks.clear();
        inner.links.clear();
        inner.arena.clear();
        inner.nonfinite = None;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Independent input that does not map to a parameter.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(Node::Leaf, value, "input");
        Var { tape: self, idx, val: value }
    }

    /// Leaf whose adjoint is accumulated into `grad[index]` on the reverse sweep.
    pub fn param(&self, index: usize, value: f64) -> Var<'_> {
        let idx = self
            .inner
            .borrow_mut()
            .push(Node::Param(index as u32), value, "param");
        Var { tape: self, idx, val: value }
    }

    /// First primitive that produced a non-finite value since the last clear.
    pub fn nonfinite(&self) -> Option<&'static str> {
        self.inner.borrow().nonfinite
    }

    /// Propagates `seed * d root` backwards, adding parameter adjoints into `grad`.
    pub fn backward(&self, root: Var<'_>, seed: f64, params: &[f64], grad: &mut [f64]) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if let Some(primitive) = inner.nonfinite {
            return Err(VcnfError::NonFinite { primitive });
        }
        let n = root.idx as usize + 1;
        inner.adj.clear();
        inner.adj.resize(inner.nodes.len(), 0.0);
        inner.adj[root.idx as usize] = seed;
        let mut out_adj = Vec::new();
        let mut in_adj = Vec::new();
        for i in (0..n).rev() {
            match inner.nodes[i] {
                Node::Leaf => {}
                Node::Param(p) => grad[p as usize] += inner.adj[i],
                Node::Unary { a, da } => {
                    let g = inner.adj[i];
                    if g != 0.0 {
                        inner.adj[a as usize] += da * g;
                    }
                }
                Node::Binary { a, b, da, db } => {
                    let g = inner.adj[i];
                    if g != 0.0 {
                        inner.adj[a as usize] += da * g;
                        inner.adj[b as usize] += db * g;
                    }
                }
                Node::Block(b) => {
                    let rec = &inner.blocks[b as usize];
                    let n_out = rec.net.output_dim();
                    out_adj.clear();
                    out_adj.extend_from_slice(&inner.adj[i + 1..i + 1 + n_out]);
                    if out_adj.iter().all(|g| *g == 0.0) {
                        continue;
                    }
                    in_adj.clear();
                    in_adj.resize(rec.net.input_dim(), 0.0);
                    rec.net
                        .backward(params, &inner.arena[rec.cache.clone()], &out_adj, grad, &mut in_adj);
                    for (j, &v) in inner.links[rec.inputs.clone()].iter().enumerate() {
                        inner.adj[v as usize] += in_adj[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjoint of `v` from the most recent [`Tape::backward`] call.
    pub fn adjoint(&self, v: Var<'_>) -> f64 {
        self.inner
            .borrow()
            .adj
            .get(v.idx as usize)
            .copied()
            .unwrap_or(0.0)
    }

    #[inline]
    fn unary(&self, a: Var<'_>, value: f64, da: f64, primitive: &'static str) -> Var<'_> {
        let idx = self
            .inner
            .borrow_mut()
            .push(Node::Unary { a: a.idx, da }, value, primitive);
        Var { tape: self, idx, val: value }
    }

    #[inline]
    fn binary(&self, a: Var<'_>, b: Var<'_>, value: f64, da: f64, db: f64, primitive: &'static str) -> Var<'_> {
        debug_assert!(std::ptr::eq(a.tape, b.tape), "variables from different tapes");
        let idx = self.inner.borrow_mut().push(
            Node::Binary {
                a: a.idx,
                b: b.idx,
                da,
                db,
            },
            value,
            primitive,
        );
        Var { tape: self, idx, val: value }
    }
}

/// Scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, self.val + rhs.val, 1.0, 1.0, "add")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, self.val - rhs.val, 1.0, -1.0, "sub")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self, rhs, self.val * rhs.val, rhs.val, self.val, "mul")
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.val / rhs.val;
        self.tape
            .binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val, "div")
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, -self.val, -1.0, "neg")
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val + rhs, 1.0, "add")
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val - rhs, 1.0, "sub")
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val * rhs, rhs, "mul")
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val / rhs, 1.0 / rhs, "div")
    }
}

impl Real for Var<'_> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary(self, e, e, "exp")
    }

    fn ln(self) -> Self {
        self.tape.unary(self, self.val.ln(), 1.0 / self.val, "ln")
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape.unary(self, s, 0.5 / s, "sqrt")
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.tape.unary(self, t, 1.0 - t * t, "tanh")
    }

    fn softplus(self) -> Self {
        self.tape
            .unary(self, softplus(self.val), sigmoid(self.val), "softplus")
    }
}

impl<'t> Ops for &'t Tape {
    type S = Var<'t>;

    fn constant(self, v: f64) -> Var<'t> {
        self.var(v)
    }

    fn dense(
        self,
        net: &ConditionerNet,
        params: &[f64],
        inputs: &[Var<'t>],
        tail: f64,
        out: &mut Vec<Var<'t>>,
    ) {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let link_start = inner.links.len();
        inner.links.extend(inputs.iter().map(|v| v.idx));
        let cache_start = inner.arena.len();
        inner.arena.extend(inputs.iter().map(|v| v.val));
        inner.arena.push(tail);
        let mut values = Vec::with_capacity(net.output_dim());
        net.forward_cached(params, &mut inner.arena, cache_start, &mut values);
        let block = inner.blocks.len() as u32;
        inner.blocks.push(BlockRecord {
            net: *net,
            inputs: link_start..inner.links.len(),
            cache: cache_start..inner.arena.len(),
        });
        inner.push(Node::Block(block), 0.0, "dense");
        out.clear();
        for v in values {
            let idx = inner.push(Node::Leaf, v, "dense");
            out.push(Var { tape: self, idx, val: v });
        }
    }
}

/// Gradient aligned index-for-index with a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Value and gradient of a scalar loss built on a fresh tape.
///
/// The closure receives the tape and the parameter values; it may create
/// parameter leaves with [`Tape::param`] or evaluate model code that reads
/// `params` through dense blocks. Both routes accumulate into the same vector.
pub fn grad<F>(params: &[f64], loss: F) -> Result<(f64, GradVector)>
where
    F: for<'t> FnOnce(&'t Tape, &[f64]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let root = loss(&tape, params)?;
    let value = root.value();
    let mut g = GradVector::zeros(params.len());
    tape.backward(root, 1.0, params, &mut g.values)?;
    if let Some(bad) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(VcnfError::Contract(format!(
            "non-finite gradient entry at parameter {bad}"
        )));
    }
    Ok((value, g))
}
