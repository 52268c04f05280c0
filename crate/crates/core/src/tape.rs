//! Scalar reverse-mode differentiation on a growable tape.
//!
//! Every differentiable quantity in the crate (inner-loop updates, DiCE
//! surrogates, meta-objectives) is recorded here as a DAG of scalar nodes.
//! Gradients come in two flavours:
//!
//! * plain values ([`Tape::grad_values`]), and
//! * graph-creating gradients ([`Tape::grad_nodes`]) whose results are new
//!   nodes on the same tape, so a second call differentiates the first.
//!
//! Both flavours run the same reverse sweep with the same accumulation order
//! (node id descending), so the values they produce are bit-identical.
//!
//! A gradient with respect to a non-leaf node is the partial derivative with
//! that node held as a leaf: the sweep stops at it instead of continuing into
//! its ancestors. Inner-loop updates at chain step `l >= 1` rely on this.
//!
//! ```
//! use metamarl::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(2.0);
//! let x2 = tape.mul(x, x).unwrap();
//! let y = tape.mul(x2, x).unwrap(); // x^3
//! let dy = tape.grad_nodes(y, &[x]).unwrap()[0];
//! assert_eq!(tape.value(dy), 12.0);
//! let d2y = tape.grad_values(dy, &[x]).unwrap()[0];
//! assert_eq!(d2y, 12.0);
//! ```

use std::fmt;

use thiserror::Error;

/// Index of a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op} evaluated outside its domain (argument {arg})")]
    Domain { op: &'static str, arg: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("node {0} does not exist on this tape")]
    UnknownNode(NodeId),
    #[error("cannot differentiate with respect to constant node {0}")]
    NotDifferentiable(NodeId),
    #[error("magic box needs at least one input")]
    EmptyMagicBox,
    #[error("linear combination got {nodes} nodes and {coefs} coefficients")]
    LengthMismatch { nodes: usize, coefs: usize },
}

/// Primitive tag of a node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Const,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Pow,
    Scale,
    Sum,
    LinComb,
    StopGradient,
    MagicBox,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Op {
    Const,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow(NodeId, f64),
    Scale(NodeId, f64),
    Sum { start: u32, len: u32 },
    LinComb { start: u32, len: u32 },
    StopGradient(NodeId),
    MagicBox { start: u32, len: u32 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Const => OpKind::Const,
            Op::Param => OpKind::Param,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Pow(..) => OpKind::Pow,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::LinComb { .. } => OpKind::LinComb,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::MagicBox { .. } => OpKind::MagicBox,
        }
    }
}

#[derive(Copy, Clone, Debug)]
struct Node {
    op: Op,
    value: f64,
}

/// Read-only view of a recorded node.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeNode {
    pub id: NodeId,
    pub op: OpKind,
    pub parents: Vec<NodeId>,
    pub value: f64,
}

/// A gradient query against one output node.
#[derive(Clone, Debug)]
pub struct GradRequest {
    pub output: NodeId,
    pub wrt: Vec<NodeId>,
    pub create_graph: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gradient {
    Values(Vec<f64>),
    Nodes(Vec<NodeId>),
}

/// Position on a tape, for rolling back scratch work.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TapeMark {
    nodes: usize,
    parents: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // Shared arena for n-ary ops; `coefs` is parallel to `parents` and only
    // meaningful for LinComb ranges.
    parents: Vec<NodeId>,
    coefs: Vec<f64>,
}

fn finite(op: &'static str, v: f64) -> Result<f64, TapeError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TapeError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
            parents: Vec::with_capacity(nodes),
            coefs: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            parents: self.parents.len(),
        }
    }

    /// Drops every node recorded after `mark`.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.parents.truncate(mark.parents);
        self.coefs.truncate(mark.parents);
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    pub fn values(&self, ids: &[NodeId]) -> Vec<f64> {
        ids.iter().map(|&id| self.value(id)).collect()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.index()].op.kind()
    }

    pub fn node(&self, id: NodeId) -> Result<TapeNode, TapeError> {
        let node = self.nodes.get(id.index()).ok_or(TapeError::UnknownNode(id))?;
        let parents = match node.op {
            Op::Const | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Neg(a) | Op::Exp(a) | Op::Log(a) | Op::Pow(a, _) | Op::Scale(a, _) => vec![a],
            Op::StopGradient(a) => vec![a],
            Op::Sum { start, len } | Op::LinComb { start, len } | Op::MagicBox { start, len } => {
                self.parents[start as usize..(start + len) as usize].to_vec()
            }
        };
        Ok(TapeNode {
            id,
            op: node.op.kind(),
            parents,
            value: node.value,
        })
    }

    fn check(&self, id: NodeId) -> Result<(), TapeError> {
        if id.index() < self.nodes.len() {
            Ok(())
        } else {
            Err(TapeError::UnknownNode(id))
        }
    }

    fn push(&mut self, op: Op, value: f64) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        id
    }

    fn push_range(&mut self, ids: &[NodeId], coefs: Option<&[f64]>) -> Result<(u32, u32), TapeError> {
        for &id in ids {
            self.check(id)?;
        }
        let start = self.parents.len() as u32;
        self.parents.extend_from_slice(ids);
        match coefs {
            Some(c) => self.coefs.extend_from_slice(c),
            None => self.coefs.extend(std::iter::repeat_n(0.0, ids.len())),
        }
        Ok((start, ids.len() as u32))
    }

    pub fn constant(&mut self, value: f64) -> Result<NodeId, TapeError> {
        Ok(self.push(Op::Const, finite("const", value)?))
    }

    pub fn param(&mut self, value: f64) -> NodeId {
        assert!(value.is_finite(), "parameter value must be finite, got {value}");
        self.push(Op::Param, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let v = finite("add", self.value(a) + self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let v = finite("sub", self.value(a) - self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let v = finite("mul", self.value(a) * self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let den = self.value(b);
        if den == 0.0 {
            return Err(TapeError::Domain { op: "div", arg: den });
        }
        let v = finite("div", self.value(a) / den)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let v = -self.value(a);
        Ok(self.push(Op::Neg(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let v = finite("exp", self.value(a).exp())?;
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let x = self.value(a);
        if x <= 0.0 {
            return Err(TapeError::Domain { op: "log", arg: x });
        }
        let v = finite("log", x.ln())?;
        Ok(self.push(Op::Log(a), v))
    }

    /// `a^p` for a constant exponent.
    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let x = self.value(a);
        if x < 0.0 && p.fract() != 0.0 {
            return Err(TapeError::Domain { op: "pow", arg: x });
        }
        if x == 0.0 && p < 0.0 {
            return Err(TapeError::Domain { op: "pow", arg: x });
        }
        let v = finite("pow", x.powf(p))?;
        Ok(self.push(Op::Pow(a, p), v))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let v = finite("scale", c * self.value(a))?;
        Ok(self.push(Op::Scale(a, c), v))
    }

    pub fn sum(&mut self, ids: &[NodeId]) -> Result<NodeId, TapeError> {
        if ids.is_empty() {
            return self.constant(0.0);
        }
        let (start, len) = self.push_range(ids, None)?;
        let mut v = self.value(ids[0]);
        for &id in &ids[1..] {
            v += self.value(id);
        }
        let v = finite("sum", v)?;
        Ok(self.push(Op::Sum { start, len }, v))
    }

    /// `sum_k coefs[k] * ids[k]` with constant coefficients.
    pub fn lin_comb(&mut self, ids: &[NodeId], coefs: &[f64]) -> Result<NodeId, TapeError> {
        if ids.len() != coefs.len() {
            return Err(TapeError::LengthMismatch {
                nodes: ids.len(),
                coefs: coefs.len(),
            });
        }
        if ids.is_empty() {
            return self.constant(0.0);
        }
        let (start, len) = self.push_range(ids, Some(coefs))?;
        let mut v = coefs[0] * self.value(ids[0]);
        for (&id, &c) in ids[1..].iter().zip(&coefs[1..]) {
            v += c * self.value(id);
        }
        let v = finite("lin_comb", v)?;
        Ok(self.push(Op::LinComb { start, len }, v))
    }

    /// Passes the value through and blocks every derivative.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let v = self.value(a);
        Ok(self.push(Op::StopGradient(a), v))
    }

    /// DiCE magic box over `ws`: forward value exactly 1, and
    /// `d box / d w = box` for every `w` in `ws`, at any order.
    pub fn magic_box(&mut self, ws: &[NodeId]) -> Result<NodeId, TapeError> {
        if ws.is_empty() {
            return Err(TapeError::EmptyMagicBox);
        }
        let (start, len) = self.push_range(ws, None)?;
        Ok(self.push(Op::MagicBox { start, len }, 1.0))
    }

    pub fn gradient(&mut self, req: &GradRequest) -> Result<Gradient, TapeError> {
        if req.create_graph {
            self.grad_nodes(req.output, &req.wrt).map(Gradient::Nodes)
        } else {
            self.grad_values(req.output, &req.wrt).map(Gradient::Values)
        }
    }

    /// Gradient of `output` as plain values.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<f64>, TapeError> {
        let adj = reverse(self, &mut ValueAdjoint, output, wrt)?;
        Ok(adj.into_iter().map(|g| g.unwrap_or(0.0)).collect())
    }

    /// Gradient of `output` recorded as new nodes, differentiable again.
    pub fn grad_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, TapeError> {
        let adj = reverse(self, &mut GraphAdjoint, output, wrt)?;
        let mut zero = None;
        let mut out = Vec::with_capacity(adj.len());
        for g in adj {
            match g {
                Some(id) => out.push(id),
                None => {
                    let z = match zero {
                        Some(z) => z,
                        None => {
                            let z = self.constant(0.0)?;
                            zero = Some(z);
                            z
                        }
                    };
                    out.push(z);
                }
            }
        }
        Ok(out)
    }
}

/// Arithmetic on adjoints. One implementation works on plain numbers, the
/// other records the same operations as tape nodes.
trait Adjoint {
    type V: Copy;
    fn one(&mut self, tape: &mut Tape) -> Result<Self::V, TapeError>;
    fn add(&mut self, tape: &mut Tape, a: Self::V, b: Self::V) -> Result<Self::V, TapeError>;
    fn neg(&mut self, tape: &mut Tape, g: Self::V) -> Result<Self::V, TapeError>;
    fn scale(&mut self, tape: &mut Tape, g: Self::V, c: f64) -> Result<Self::V, TapeError>;
    fn mul_node(&mut self, tape: &mut Tape, g: Self::V, n: NodeId) -> Result<Self::V, TapeError>;
    fn div_node(&mut self, tape: &mut Tape, g: Self::V, n: NodeId) -> Result<Self::V, TapeError>;
    /// `g * p * a^(p-1)`
    fn pow_rule(&mut self, tape: &mut Tape, g: Self::V, a: NodeId, p: f64) -> Result<Self::V, TapeError>;
}

struct ValueAdjoint;

impl Adjoint for ValueAdjoint {
    type V = f64;
    fn one(&mut self, _: &mut Tape) -> Result<f64, TapeError> {
        Ok(1.0)
    }
    fn add(&mut self, _: &mut Tape, a: f64, b: f64) -> Result<f64, TapeError> {
        finite("add", a + b)
    }
    fn neg(&mut self, _: &mut Tape, g: f64) -> Result<f64, TapeError> {
        Ok(-g)
    }
    fn scale(&mut self, _: &mut Tape, g: f64, c: f64) -> Result<f64, TapeError> {
        finite("scale", c * g)
    }
    fn mul_node(&mut self, tape: &mut Tape, g: f64, n: NodeId) -> Result<f64, TapeError> {
        finite("mul", g * tape.value(n))
    }
    fn div_node(&mut self, tape: &mut Tape, g: f64, n: NodeId) -> Result<f64, TapeError> {
        let den = tape.value(n);
        if den == 0.0 {
            return Err(TapeError::Domain { op: "div", arg: den });
        }
        finite("div", g / den)
    }
    fn pow_rule(&mut self, tape: &mut Tape, g: f64, a: NodeId, p: f64) -> Result<f64, TapeError> {
        let q = finite("pow", tape.value(a).powf(p - 1.0))?;
        let q = finite("scale", p * q)?;
        finite("mul", g * q)
    }
}

struct GraphAdjoint;

impl Adjoint for GraphAdjoint {
    type V = NodeId;
    fn one(&mut self, tape: &mut Tape) -> Result<NodeId, TapeError> {
        tape.constant(1.0)
    }
    fn add(&mut self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        tape.add(a, b)
    }
    fn neg(&mut self, tape: &mut Tape, g: NodeId) -> Result<NodeId, TapeError> {
        tape.neg(g)
    }
    fn scale(&mut self, tape: &mut Tape, g: NodeId, c: f64) -> Result<NodeId, TapeError> {
        tape.scale(g, c)
    }
    fn mul_node(&mut self, tape: &mut Tape, g: NodeId, n: NodeId) -> Result<NodeId, TapeError> {
        tape.mul(g, n)
    }
    fn div_node(&mut self, tape: &mut Tape, g: NodeId, n: NodeId) -> Result<NodeId, TapeError> {
        tape.div(g, n)
    }
    fn pow_rule(&mut self, tape: &mut Tape, g: NodeId, a: NodeId, p: f64) -> Result<NodeId, TapeError> {
        let q = tape.pow(a, p - 1.0)?;
        let q = tape.scale(q, p)?;
        tape.mul(g, q)
    }
}

fn reverse<A: Adjoint>(
    tape: &mut Tape,
    alg: &mut A,
    output: NodeId,
    wrt: &[NodeId],
) -> Result<Vec<Option<A::V>>, TapeError> {
    tape.check(output)?;
    for &w in wrt {
        tape.check(w)?;
        if tape.kind(w) == OpKind::Const {
            return Err(TapeError::NotDifferentiable(w));
        }
    }
    let Some(lo) = wrt.iter().map(|w| w.index()).min() else {
        return Ok(vec![]);
    };
    let hi = output.index();
    if hi < lo {
        return Ok(vec![None; wrt.len()]);
    }
    let span = hi - lo + 1;
    let mut adj: Vec<Option<A::V>> = vec![None; span];
    let mut is_leaf = vec![false; span];
    for &w in wrt {
        is_leaf[w.index() - lo] = true;
    }
    adj[hi - lo] = Some(alg.one(tape)?);

    // Contributions to parents below `lo` are dropped: nothing there can
    // reach a requested node.
    macro_rules! acc {
        ($p:expr, $c:expr) => {{
            let p: NodeId = $p;
            if p.index() >= lo {
                let slot = p.index() - lo;
                let c = $c;
                adj[slot] = Some(match adj[slot] {
                    None => c,
                    Some(prev) => alg.add(tape, prev, c)?,
                });
            }
        }};
    }

    for idx in (lo..=hi).rev() {
        let Some(g) = adj[idx - lo] else { continue };
        if is_leaf[idx - lo] {
            continue;
        }
        let me = NodeId(idx as u32);
        match tape.nodes[idx].op {
            Op::Const | Op::Param | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                acc!(a, g);
                acc!(b, g);
            }
            Op::Sub(a, b) => {
                acc!(a, g);
                if b.index() >= lo {
                    acc!(b, alg.neg(tape, g)?);
                }
            }
            Op::Mul(a, b) => {
                if a.index() >= lo {
                    acc!(a, alg.mul_node(tape, g, b)?);
                }
                if b.index() >= lo {
                    acc!(b, alg.mul_node(tape, g, a)?);
                }
            }
            Op::Div(a, b) => {
                if a.index() >= lo {
                    acc!(a, alg.div_node(tape, g, b)?);
                }
                if b.index() >= lo {
                    let t = alg.mul_node(tape, g, me)?;
                    let t = alg.div_node(tape, t, b)?;
                    acc!(b, alg.neg(tape, t)?);
                }
            }
            Op::Neg(a) => {
                if a.index() >= lo {
                    acc!(a, alg.neg(tape, g)?);
                }
            }
            Op::Exp(a) => {
                if a.index() >= lo {
                    acc!(a, alg.mul_node(tape, g, me)?);
                }
            }
            Op::Log(a) => {
                if a.index() >= lo {
                    acc!(a, alg.div_node(tape, g, a)?);
                }
            }
            Op::Pow(a, p) => {
                if a.index() >= lo {
                    acc!(a, alg.pow_rule(tape, g, a, p)?);
                }
            }
            Op::Scale(a, c) => {
                if a.index() >= lo {
                    acc!(a, alg.scale(tape, g, c)?);
                }
            }
            Op::Sum { start, len } => {
                for j in start as usize..(start + len) as usize {
                    acc!(tape.parents[j], g);
                }
            }
            Op::LinComb { start, len } => {
                for j in start as usize..(start + len) as usize {
                    let p = tape.parents[j];
                    if p.index() >= lo {
                        let c = tape.coefs[j];
                        acc!(p, alg.scale(tape, g, c)?);
                    }
                }
            }
            Op::MagicBox { start, len } => {
                let mut boxed = None;
                for j in start as usize..(start + len) as usize {
                    let p = tape.parents[j];
                    if p.index() >= lo {
                        let c = match boxed {
                            Some(c) => c,
                            None => {
                                let c = alg.mul_node(tape, g, me)?;
                                boxed = Some(c);
                                c
                            }
                        };
                        acc!(p, c);
                    }
                }
            }
        }
    }

    Ok(wrt.iter().map(|w| adj[w.index() - lo]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_log_identities() {
        let mut t = Tape::new();
        let a = t.constant(2.0).unwrap();
        let b = t.constant(3.0).unwrap();
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), 5.0);
        let one = t.constant(1.0).unwrap();
        let l = t.log(one).unwrap();
        assert_eq!(t.value(l), 0.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.param(4.0);
        let s = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(s), 4.0);
        assert_eq!(t.grad_values(s, &[x]).unwrap(), vec![0.0]);
        let sq = t.mul(x, x).unwrap();
        let e = t.exp(sq).unwrap();
        let s2 = t.stop_gradient(e).unwrap();
        let y = t.mul(s2, x).unwrap();
        // d/dx [stop(exp(x^2)) * x] = exp(16)
        assert_eq!(t.grad_values(y, &[x]).unwrap()[0], t.value(e));
    }

    #[test]
    fn product_rule_and_second_order_cube() {
        let mut t = Tape::new();
        let x = t.param(2.0);
        let y = t.param(3.0);
        let p = t.mul(x, y).unwrap();
        assert_eq!(t.grad_values(p, &[x]).unwrap(), vec![3.0]);

        let c = t.pow(x, 3.0).unwrap();
        let d1 = t.grad_nodes(c, &[x]).unwrap()[0];
        assert_eq!(t.value(d1), 12.0);
        let d2 = t.grad_values(d1, &[x]).unwrap()[0];
        assert_eq!(d2, 12.0);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let z = t.constant(0.0).unwrap();
        let m = t.constant(-1.0).unwrap();
        assert!(matches!(t.log(z), Err(TapeError::Domain { op: "log", .. })));
        assert!(matches!(t.log(m), Err(TapeError::Domain { op: "log", .. })));
        let one = t.constant(1.0).unwrap();
        assert!(matches!(t.div(one, z), Err(TapeError::Domain { op: "div", .. })));
        assert!(matches!(t.magic_box(&[]), Err(TapeError::EmptyMagicBox)));
        let big = t.constant(1000.0).unwrap();
        assert!(matches!(t.exp(big), Err(TapeError::NonFinite { .. })));
    }

    #[test]
    fn constant_wrt_is_rejected() {
        let mut t = Tape::new();
        let c = t.constant(1.0).unwrap();
        let x = t.param(1.0);
        let y = t.mul(c, x).unwrap();
        assert_eq!(t.grad_values(y, &[c]), Err(TapeError::NotDifferentiable(c)));
    }

    #[test]
    fn magic_box_forward_is_one_and_first_order_is_score() {
        let mut t = Tape::new();
        let theta = t.param(0.3);
        // p(theta) = exp(theta) / (1 + exp(theta))
        let e = t.exp(theta).unwrap();
        let one = t.constant(1.0).unwrap();
        let den = t.add(one, e).unwrap();
        let p = t.div(e, den).unwrap();
        let lp = t.log(p).unwrap();
        let b = t.magic_box(&[lp]).unwrap();
        assert_eq!(t.value(b).to_bits(), 1.0f64.to_bits());
        let c = 2.5;
        let obj = t.scale(b, c).unwrap();
        let g = t.grad_values(obj, &[theta]).unwrap()[0];
        let pv = t.value(p);
        // d/dtheta log sigmoid(theta) = 1 - p
        assert!((g - c * (1.0 - pv)).abs() < 1e-15);
    }

    #[test]
    fn magic_box_second_order_matches_symbolic() {
        // d^2/dtheta^2 exp(theta^2 - c)|_{c = theta^2} = 4 theta^2 + 2
        let mut t = Tape::new();
        let theta = t.param(1.0);
        let sq = t.mul(theta, theta).unwrap();
        let b = t.magic_box(&[sq]).unwrap();
        let d1 = t.grad_nodes(b, &[theta]).unwrap()[0];
        assert!((t.value(d1) - 2.0).abs() < 1e-15);
        let d2 = t.grad_values(d1, &[theta]).unwrap()[0];
        assert!((d2 - 6.0).abs() < 1e-14);
    }

    #[test]
    fn partial_derivative_stops_at_inner_node() {
        let mut t = Tape::new();
        let x = t.param(3.0);
        let u = t.mul(x, x).unwrap();
        let y = t.mul(u, x).unwrap();
        // holding u fixed: dy/du = x, dy/dx = u
        let g = t.grad_values(y, &[u, x]).unwrap();
        assert_eq!(g, vec![3.0, 9.0]);
    }

    #[test]
    fn unrelated_wrt_gets_zero() {
        let mut t = Tape::new();
        let x = t.param(1.0);
        let y = t.param(2.0);
        let z = t.exp(x).unwrap();
        assert_eq!(t.grad_values(z, &[y]).unwrap(), vec![0.0]);
        let n = t.grad_nodes(z, &[y]).unwrap();
        assert_eq!(t.value(n[0]), 0.0);
    }

    #[test]
    fn value_and_graph_gradients_are_bit_identical() {
        let mut t = Tape::new();
        let x = t.param(0.7);
        let y = t.param(-1.3);
        let a = t.mul(x, y).unwrap();
        let b = t.exp(a).unwrap();
        let c = t.div(b, x).unwrap();
        let d = t.lin_comb(&[a, b, c], &[0.5, -2.0, 3.0]).unwrap();
        let e = t.magic_box(&[a, c]).unwrap();
        let f = t.mul(d, e).unwrap();
        let vals = t.grad_values(f, &[x, y]).unwrap();
        let nodes = t.grad_nodes(f, &[x, y]).unwrap();
        for (v, n) in vals.iter().zip(&nodes) {
            assert_eq!(v.to_bits(), t.value(*n).to_bits());
        }
    }

    #[test]
    fn node_view_reports_parents_in_dag_order() {
        let mut t = Tape::new();
        let x = t.param(1.0);
        let y = t.param(2.0);
        let s = t.sum(&[x, y, x]).unwrap();
        let n = t.node(s).unwrap();
        assert_eq!(n.op, OpKind::Sum);
        assert_eq!(n.parents, vec![x, y, x]);
        assert!(n.parents.iter().all(|p| p < &s));
        assert_eq!(t.grad_values(s, &[x]).unwrap(), vec![2.0]);
    }

    #[test]
    fn truncate_rolls_back() {
        let mut t = Tape::new();
        let x = t.param(1.0);
        let m = t.mark();
        let y = t.exp(x).unwrap();
        let _ = t.grad_nodes(y, &[x]).unwrap();
        t.truncate(m);
        assert_eq!(t.len(), 1);
    }
}
