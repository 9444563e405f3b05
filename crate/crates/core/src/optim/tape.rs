//! Reverse-mode gradient tape.
//!
//! Every scalar operation of a forward pass that touches a tracked value is
//! appended as a node holding its parents and the local partial derivatives
//! evaluated during the forward pass. Values that do not depend on any
//! tracked quantity are plain constants and never reach the tape, so an
//! inactive tape runs the same code at the cost of a branch per operation.
//!
//! Operations that touch large parameter arrays (grid gathers, the gain
//! network, environment queries) are recorded as a single custom node with
//! an [`ExtOp`] payload; the reverse sweep hands their output adjoints to a
//! caller-supplied handler which scatters into parameter gradients and
//! returns adjoints for the custom op's tape inputs.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::ext::ExtOp;

const NONE: u32 = u32::MAX;
const CUSTOM: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct NodeRec {
    start: u32,
    len: u32,
}

struct CustomRec {
    inputs_start: u32,
    n_inputs: u32,
    head: u32,
    n_out: u32,
    op: ExtOp,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<NodeRec>,
    edges: Vec<(u32, f64)>,
    customs: Vec<CustomRec>,
    custom_inputs: Vec<u32>,
}

pub struct Tape {
    recording: bool,
    inner: RefCell<Inner>,
}

/// A scalar value that may be tracked on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.idx == NONE {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records operations on tracked values.
    pub fn new() -> Self {
        Tape {
            recording: true,
            inner: RefCell::new(Inner::default()),
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn inactive() -> Self {
        Tape {
            recording: false,
            inner: RefCell::new(Inner::default()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An independent variable (gradient will be reported for it).
    pub fn var(&self, val: f64) -> Var<'_> {
        if !self.recording {
            return self.constant(val);
        }
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        let start = inner.edges.len() as u32;
        inner.nodes.push(NodeRec { start, len: 0 });
        Var { tape: self, idx, val }
    }

    pub fn constant(&self, val: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: NONE,
            val,
        }
    }

    pub fn zero(&self) -> Var<'_> {
        self.constant(0.0)
    }

    fn push(&self, val: f64, parents: &[(u32, f64)]) -> Var<'_> {
        if !self.recording || parents.iter().all(|&(p, _)| p == NONE) {
            return self.constant(val);
        }
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        let start = inner.edges.len() as u32;
        let mut len = 0;
        for &(p, d) in parents {
            if p != NONE {
                inner.edges.push((p, d));
                len += 1;
            }
        }
        inner.nodes.push(NodeRec { start, len });
        Var { tape: self, idx, val }
    }

    fn unary(&self, a: Var<'_>, val: f64, da: f64) -> Var<'_> {
        self.push(val, &[(a.idx, da)])
    }

    /// Σ vs
    pub fn sum<'t>(&'t self, vs: &[Var<'t>]) -> Var<'t> {
        let val = vs.iter().map(|v| v.val).sum();
        if !self.recording {
            return self.constant(val);
        }
        let parents: Vec<(u32, f64)> = vs.iter().map(|v| (v.idx, 1.0)).collect();
        self.push(val, &parents)
    }

    /// Σ a_i b_i for tracked `a` and constant `b`.
    pub fn dot_const<'t>(&'t self, a: &[Var<'t>], b: &[f64]) -> Var<'t> {
        debug_assert_eq!(a.len(), b.len());
        let val = a.iter().zip(b).map(|(x, y)| x.val * y).sum();
        if !self.recording {
            return self.constant(val);
        }
        let parents: Vec<(u32, f64)> = a.iter().zip(b).map(|(x, &y)| (x.idx, y)).collect();
        self.push(val, &parents)
    }

    /// Σ a_i b_i with both sides tracked.
    pub fn dot<'t>(&'t self, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        debug_assert_eq!(a.len(), b.len());
        let val = a.iter().zip(b).map(|(x, y)| x.val * y.val).sum();
        if !self.recording {
            return self.constant(val);
        }
        let mut parents = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            parents.push((x.idx, y.val));
            parents.push((y.idx, x.val));
        }
        self.push(val, &parents)
    }

    /// Records a custom operation with `inputs` on the tape and the given
    /// forward output values. Returns one variable per output.
    pub fn custom<'t>(&'t self, op: ExtOp, inputs: &[Var<'t>], outputs: &[f64]) -> Vec<Var<'t>> {
        if !self.recording || outputs.is_empty() {
            return outputs.iter().map(|&v| self.constant(v)).collect();
        }
        let mut inner = self.inner.borrow_mut();
        let head = inner.nodes.len() as u32;
        let custom_idx = inner.customs.len() as u32;
        let inputs_start = inner.custom_inputs.len() as u32;
        inner.custom_inputs.extend(inputs.iter().map(|v| v.idx));
        inner.customs.push(CustomRec {
            inputs_start,
            n_inputs: inputs.len() as u32,
            head,
            n_out: outputs.len() as u32,
            op,
        });
        let estart = inner.edges.len() as u32;
        inner.nodes.push(NodeRec {
            start: custom_idx,
            len: CUSTOM,
        });
        for _ in 1..outputs.len() {
            inner.nodes.push(NodeRec { start: estart, len: 0 });
        }
        outputs
            .iter()
            .enumerate()
            .map(|(k, &val)| Var {
                tape: self,
                idx: head + k as u32,
                val,
            })
            .collect()
    }

    /// Reverse sweep seeded with `(variable, adjoint)` pairs. `handler` is
    /// called for every custom node with its output adjoints and a buffer
    /// (zeroed) for the adjoints of its inputs. Returns the adjoint of every
    /// node, indexable through [`Var::adjoint`].
    pub fn backward(
        &self,
        seeds: &[(Var<'_>, f64)],
        handler: &mut dyn FnMut(&ExtOp, &[f64], &mut [f64]),
    ) -> Adjoints {
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.nodes.len()];
        for (v, s) in seeds {
            if v.idx != NONE {
                adj[v.idx as usize] += s;
            }
        }
        let mut in_buf: Vec<f64> = Vec::new();
        for i in (0..inner.nodes.len()).rev() {
            let node = inner.nodes[i];
            if node.len == CUSTOM {
                let c = &inner.customs[node.start as usize];
                debug_assert_eq!(c.head as usize, i);
                let outs = &adj[i..i + c.n_out as usize];
                if outs.iter().all(|&a| a == 0.0) {
                    continue;
                }
                let outs = outs.to_vec();
                in_buf.clear();
                in_buf.resize(c.n_inputs as usize, 0.0);
                handler(&c.op, &outs, &mut in_buf);
                let ins = &inner.custom_inputs
                    [c.inputs_start as usize..(c.inputs_start + c.n_inputs) as usize];
                for (&p, &a) in ins.iter().zip(&in_buf) {
                    if p != NONE {
                        adj[p as usize] += a;
                    }
                }
                continue;
            }
            let a = adj[i];
            if a == 0.0 || node.len == 0 {
                continue;
            }
            for &(p, d) in &inner.edges[node.start as usize..(node.start + node.len) as usize] {
                adj[p as usize] += a * d;
            }
        }
        Adjoints(adj)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    pub fn get(&self, v: Var<'_>) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.0[v.idx as usize]
        }
    }
}

impl<'t> Var<'t> {
    pub fn val(self) -> f64 {
        self.val
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(self) -> bool {
        self.idx != NONE
    }

    pub fn adjoint(self, adj: &Adjoints) -> f64 {
        adj.get(self)
    }

    fn c(self, v: f64) -> Var<'t> {
        self.tape.constant(v)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.tape.unary(self, e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, self.val.ln(), 1.0 / self.val)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.val.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.tape.unary(self, s, d)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.val.powi(n - 1)
        };
        self.tape.unary(self, self.val.powi(n), d)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, self.val * self.val, 2.0 * self.val)
    }

    pub fn recip(self) -> Var<'t> {
        let r = 1.0 / self.val;
        self.tape.unary(self, r, -r * r)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = crate::math::sigmoid(self.val);
        self.tape.unary(self, s, s * (1.0 - s))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = crate::math::softplus(self.val);
        self.tape.unary(self, v, crate::math::sigmoid(self.val))
    }

    /// max(0, x)
    pub fn relu(self) -> Var<'t> {
        if self.val > 0.0 {
            self
        } else {
            self.c(0.0)
        }
    }

    pub fn max_const(self, m: f64) -> Var<'t> {
        if self.val >= m {
            self
        } else {
            self.c(m)
        }
    }

    pub fn min_const(self, m: f64) -> Var<'t> {
        if self.val <= m {
            self
        } else {
            self.c(m)
        }
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.max_const(lo).min_const(hi)
    }

    /// Detached copy: same value, no gradient.
    pub fn detach(self) -> Var<'t> {
        self.c(self.val)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, |$a:ident, $b:ident| $val:expr, $da:expr, $db:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let ($a, $b) = (self.val, rhs.val);
                self.tape.push($val, &[(self.idx, $da), (rhs.idx, $db)])
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let ($a, $b) = (self.val, rhs);
                self.tape.push($val, &[(self.idx, $da)])
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let ($a, $b) = (self, rhs.val);
                rhs.tape.push($val, &[(rhs.idx, $db)])
            }
        }
    };
}

binop!(Add, add, |a, b| a + b, 1.0, 1.0);
binop!(Sub, sub, |a, b| a - b, 1.0, -1.0);
binop!(Mul, mul, |a, b| a * b, b, a);
binop!(Div, div, |a, b| a / b, 1.0 / b, -a / (b * b));

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, -self.val, -1.0)
    }
}

/// Three tracked components (a direction or an RGB triple).
pub type Var3<'t> = [Var<'t>; 3];

pub fn v3_const(t: &Tape, v: [f64; 3]) -> Var3<'_> {
    [t.constant(v[0]), t.constant(v[1]), t.constant(v[2])]
}

pub fn v3_vals(v: &Var3<'_>) -> [f64; 3] {
    [v[0].val(), v[1].val(), v[2].val()]
}

pub fn v3_dot_const<'t>(a: &Var3<'t>, b: crate::math::Vec3) -> Var<'t> {
    a[0] * b.x + a[1] * b.y + a[2] * b.z
}

pub fn v3_dot<'t>(a: &Var3<'t>, b: &Var3<'t>) -> Var<'t> {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v3_scale<'t>(a: &Var3<'t>, s: Var<'t>) -> Var3<'t> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v3_add<'t>(a: &Var3<'t>, b: &Var3<'t>) -> Var3<'t> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v3_mul<'t>(a: &Var3<'t>, b: &Var3<'t>) -> Var3<'t> {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_custom(_: &ExtOp, _: &[f64], _: &mut [f64]) {
        unreachable!("no custom ops recorded")
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_the_input() {
        let t = Tape::new();
        let ps: Vec<Var> = [0.5, -1.25, 3.0].iter().map(|&p| t.var(p)).collect();
        let sq: Vec<Var> = ps.iter().map(|p| p.square()).collect();
        let loss = t.sum(&sq);
        let adj = t.backward(&[(loss, 1.0)], &mut no_custom);
        for p in &ps {
            assert_eq!(adj.get(*p), 2.0 * p.val());
        }
    }

    #[test]
    fn chain_rule_through_elementary_functions() {
        // f(x, y) = exp(x*y) / (1 + sqrt(y)) - sigmoid(x)
        let (x0, y0) = (0.3, 1.7);
        let f = |x: f64, y: f64| {
            (x * y).exp() / (1.0 + y.sqrt()) - crate::math::sigmoid(x)
        };
        let t = Tape::new();
        let x = t.var(x0);
        let y = t.var(y0);
        let out = (x * y).exp() / (1.0 + y.sqrt()) - x.sigmoid();
        assert!((out.val() - f(x0, y0)).abs() < 1e-14);
        let adj = t.backward(&[(out, 1.0)], &mut no_custom);
        let h = 1e-6;
        let dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let dy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((adj.get(x) - dx).abs() < 1e-8);
        assert!((adj.get(y) - dy).abs() < 1e-8);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let t = Tape::new();
        let a = t.constant(2.0);
        let b = (a * 3.0 + 1.0).exp().sqrt();
        assert!(!b.is_tracked());
        assert!(t.is_empty());
    }

    #[test]
    fn inactive_tape_computes_values_only() {
        let t = Tape::inactive();
        let x = t.var(2.0);
        let y = x * x + 1.0;
        assert_eq!(y.val(), 5.0);
        assert!(t.is_empty());
    }

    #[test]
    fn dot_products_propagate_to_both_sides() {
        let t = Tape::new();
        let a: Vec<Var> = [1.0, 2.0].iter().map(|&v| t.var(v)).collect();
        let b: Vec<Var> = [3.0, -4.0].iter().map(|&v| t.var(v)).collect();
        let d = t.dot(&a, &b);
        assert_eq!(d.val(), -5.0);
        let adj = t.backward(&[(d, 1.0)], &mut no_custom);
        assert_eq!(adj.get(a[0]), 3.0);
        assert_eq!(adj.get(b[1]), 2.0);
    }
}
