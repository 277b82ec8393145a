use std::fmt;
use std::str::FromStr;

use super::{broadcast_shape, broadcast_strides, for_each_index, for_each_index2, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Silu,
    GeluTanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    ClampMin,
    Affine,
    Sum,
    Mean,
    Softmax,
    MatMul,
    Bmm,
    Conv2d,
    Reshape,
    Permute,
    SelectRows,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Silu,
        OpKind::GeluTanh,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Tanh,
        OpKind::ClampMin,
        OpKind::Affine,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::MatMul,
        OpKind::Bmm,
        OpKind::Conv2d,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::SelectRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Silu => "silu",
            OpKind::GeluTanh => "gelu_tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Tanh => "tanh",
            OpKind::ClampMin => "clamp_min",
            OpKind::Affine => "affine",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::MatMul => "matmul",
            OpKind::Bmm => "bmm",
            OpKind::Conv2d => "conv2d",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::SelectRows => "select_rows",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Silu,
    GeluTanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    ClampMin(Var, f64),
    Affine(Var, f64),
    Reduce { x: Var, keep_shape: Vec<usize>, mean: bool },
    Softmax { x: Var, axis: usize },
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, k: Var, stride: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(Binary::Add, ..) => OpKind::Add,
            Op::Binary(Binary::Sub, ..) => OpKind::Sub,
            Op::Binary(Binary::Mul, ..) => OpKind::Mul,
            Op::Binary(Binary::Div, ..) => OpKind::Div,
            Op::Unary(u, _) => match u {
                Unary::Neg => OpKind::Neg,
                Unary::Silu => OpKind::Silu,
                Unary::GeluTanh => OpKind::GeluTanh,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Exp => OpKind::Exp,
                Unary::Log => OpKind::Log,
                Unary::Sqrt => OpKind::Sqrt,
                Unary::Square => OpKind::Square,
                Unary::Tanh => OpKind::Tanh,
            },
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Affine(..) => OpKind::Affine,
            Op::Reduce { mean: false, .. } => OpKind::Sum,
            Op::Reduce { mean: true, .. } => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::SelectRows { .. } => OpKind::SelectRows,
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// A single-use gradient tape.
///
/// Values are immutable once recorded. `backward` may run once; `reset`
/// clears the tape for the next forward pass.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Diagnostic hook: the backward rule of `kind` propagates a distorted
    /// gradient. Used to prove that the gradient checker catches bad rules.
    pub fn with_fault_injection(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Operation kinds in execution order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| Error::dim(name, &ta.shape, &tb.shape))?;
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<S> = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(&ta.shape, &out_shape);
            let sb = broadcast_strides(&tb.shape, &out_shape);
            let mut d = Vec::with_capacity(out_shape.iter().product());
            for_each_index2(&out_shape, &sa, &sb, |_, ia, ib| d.push(f(ta.data[ia], tb.data[ib])));
            d
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    fn unary(&mut self, u: Unary, x: Var) -> Var {
        let f = |v: S| -> S {
            match u {
                Unary::Neg => -v,
                Unary::Silu => v * sigmoid(v),
                Unary::GeluTanh => {
                    let inner = S::from_f64(SQRT_2_OVER_PI) * (v + S::from_f64(GELU_C) * v * v * v);
                    S::from_f64(0.5) * v * (S::one() + inner.tanh())
                }
                Unary::Sigmoid => sigmoid(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Square => v * v,
                Unary::Tanh => v.tanh(),
            }
        };
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(u, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }
    pub fn gelu_tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::GeluTanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    /// `max(x, floor)` elementwise; gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let c = S::from_f64(floor);
        let value = self.nodes[x.0].value.map(|v| if v > c { v } else { c });
        let rg = self.rg(&[x]);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (S::from_f64(scale), S::from_f64(shift));
        let value = self.nodes[x.0].value.map(|v| s * v + b);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let rank = t.rank();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::dim(if mean { "mean" } else { "sum" }, &t.shape, &[bad]));
        }
        let mut keep_shape = t.shape.clone();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let count: usize = t.shape.iter().product::<usize>() / keep_shape.iter().product::<usize>().max(1);
        let ostr = broadcast_strides(&keep_shape, &t.shape);
        let mut out = vec![S::zero(); keep_shape.iter().product()];
        let mut i = 0;
        for_each_index(&t.shape, &ostr, |o| {
            out[o] += t.data[i];
            i += 1;
        });
        if mean {
            let inv = S::one() / S::from_f64(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            t.shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Reduce { x, keep_shape, mean },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, false).expect("all axes are in range")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, true).expect("all axes are in range")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() {
            return Err(Error::dim("softmax", &t.shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&t.shape, axis);
        let mut out = vec![S::zero(); t.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = S::neg_infinity();
                for j in 0..len {
                    m = m.max(t.data[at(j)]);
                }
                let mut z = S::zero();
                for j in 0..len {
                    let e = (t.data[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.rank() < 1 || tb.rank() != 2 || *ta.shape.last().unwrap() != tb.shape[0] {
            return Err(Error::dim("matmul", &ta.shape, &tb.shape));
        }
        let k = tb.shape[0];
        let n = tb.shape[1];
        let m = ta.data.len() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            &ta.data,
            (k as isize, 1),
            &tb.data,
            (n as isize, 1),
            S::zero(),
            &mut out,
        );
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// Batched product over identical leading axes: `a[..., m, k] · b[..., k, n]`,
    /// or `a · bᵀ` with `b[..., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra < 3 || ra != rb || ta.shape[..ra - 2] != tb.shape[..rb - 2] {
            return Err(Error::dim("bmm", &ta.shape, &tb.shape));
        }
        let (m, k) = (ta.shape[ra - 2], ta.shape[ra - 1]);
        let (kb, n) = if trans_b {
            (tb.shape[rb - 1], tb.shape[rb - 2])
        } else {
            (tb.shape[rb - 2], tb.shape[rb - 1])
        };
        if k != kb {
            return Err(Error::dim("bmm", &ta.shape, &tb.shape));
        }
        let batch: usize = ta.shape[..ra - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &ta.data[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &tb.data[i * k * n..(i + 1) * k * n],
                bs,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = ta.shape[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::Bmm { a, b, trans_b }, rg))
    }

    /// 3×3 convolution with zero padding 1: `x[B,C,H,W] ⊛ k[O,C,3,3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[k.0].value;
        if tx.rank() != 4 || tk.rank() != 4 || tk.shape[2] != 3 || tk.shape[3] != 3 || tk.shape[1] != tx.shape[1] {
            return Err(Error::dim("conv2d", &tx.shape, &tk.shape));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let geo = ConvGeom::new(&tx.shape, tk.shape[0], stride);
        if geo.h < 3 || geo.w < 3 {
            return Err(Error::dim("conv2d", &tx.shape, &tk.shape));
        }
        let mut out = vec![S::zero(); geo.b * geo.o * geo.hw_out()];
        let mut cols = vec![S::zero(); geo.c * 9 * geo.hw_out()];
        for bi in 0..geo.b {
            geo.im2col(&tx.data[bi * geo.in_size()..(bi + 1) * geo.in_size()], &mut cols);
            S::gemm(
                geo.o,
                geo.c * 9,
                geo.hw_out(),
                &tk.data,
                ((geo.c * 9) as isize, 1),
                &cols,
                (geo.hw_out() as isize, 1),
                S::zero(),
                &mut out[bi * geo.out_size()..(bi + 1) * geo.out_size()],
            );
        }
        let shape = vec![geo.b, geo.o, geo.ho, geo.wo];
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, k, stride }, rg))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.permute(perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Rows of axis 0, in the given order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.select_rows(rows)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every `requires_grad` value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; reset it first".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let propagated = if self.fault == Some(node.op.kind()) {
                let bump = S::from_f64(1.5);
                g.iter().map(|&v| v * bump).collect()
            } else {
                g.clone()
            };
            self.propagate(i, &propagated, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut ga = wa.then(|| vec![S::zero(); ta.numel()]);
                let mut gb = wb.then(|| vec![S::zero(); tb.numel()]);
                let mut body = |i: usize, ia: usize, ib: usize| {
                    let (x, y, gi) = (ta.data[ia], tb.data[ib], g[i]);
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                };
                if ta.shape == tb.shape {
                    for k in 0..g.len() {
                        body(k, k, k);
                    }
                } else {
                    let sa = broadcast_strides(&ta.shape, &out.shape);
                    let sb = broadcast_strides(&tb.shape, &out.shape);
                    for_each_index2(&out.shape, &sa, &sb, body);
                }
                if let Some(ga) = ga {
                    accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Unary(u, x) => {
                let xv = &self.nodes[x.0].value.data;
                let yv = &out.data;
                let d: Vec<S> = (0..g.len())
                    .map(|k| {
                        let (x, y) = (xv[k], yv[k]);
                        let dydx = match u {
                            Unary::Neg => -S::one(),
                            Unary::Silu => {
                                let s = sigmoid(x);
                                s * (S::one() + x * (S::one() - s))
                            }
                            Unary::GeluTanh => {
                                let c = S::from_f64(SQRT_2_OVER_PI);
                                let a = S::from_f64(GELU_C);
                                let th = (c * (x + a * x * x * x)).tanh();
                                let half = S::from_f64(0.5);
                                half * (S::one() + th)
                                    + half * x * (S::one() - th * th) * c * (S::one() + S::from_f64(3.0) * a * x * x)
                            }
                            Unary::Sigmoid => y * (S::one() - y),
                            Unary::Exp => y,
                            Unary::Log => S::one() / x,
                            Unary::Sqrt => S::from_f64(0.5) / y,
                            Unary::Square => S::from_f64(2.0) * x,
                            Unary::Tanh => S::one() - y * y,
                        };
                        g[k] * dydx
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::ClampMin(x, floor) => {
                let c = S::from_f64(*floor);
                let xv = &self.nodes[x.0].value.data;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > c { gi } else { S::zero() })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Affine(x, s) => {
                let s = S::from_f64(*s);
                accumulate(grads, *x, g.iter().map(|&v| v * s).collect());
            }
            Op::Reduce { x, keep_shape, mean } => {
                let tx = &self.nodes[x.0].value;
                let scale = if *mean {
                    S::from_f64(keep_shape.iter().product::<usize>() as f64 / tx.numel() as f64)
                } else {
                    S::one()
                };
                let ostr = broadcast_strides(keep_shape, &tx.shape);
                let mut d = Vec::with_capacity(tx.numel());
                for_each_index(&tx.shape, &ostr, |o| d.push(g[o] * scale));
                accumulate(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                let mut d = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (k, n) = (tb.shape[0], tb.shape[1]);
                let m = ta.numel() / k.max(1);
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        &tb.data,
                        (1, n as isize),
                        S::zero(),
                        &mut da,
                    );
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        &ta.data,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        S::zero(),
                        &mut db,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let r = ta.rank();
                let (m, k) = (ta.shape[r - 2], ta.shape[r - 1]);
                let n = out.shape[r - 1];
                let batch = ta.numel() / (m * k).max(1);
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut da = vec![S::zero(); ta.numel()];
                    // dA = dC · op(B)ᵀ
                    let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        S::gemm(
                            m,
                            n,
                            k,
                            &g[i * mn..(i + 1) * mn],
                            (n as isize, 1),
                            &tb.data[i * kn..(i + 1) * kn],
                            bs,
                            S::zero(),
                            &mut da[i * mk..(i + 1) * mk],
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); tb.numel()];
                    for i in 0..batch {
                        let (ga, aa) = (&g[i * mn..(i + 1) * mn], &ta.data[i * mk..(i + 1) * mk]);
                        let dst = &mut db[i * kn..(i + 1) * kn];
                        if *trans_b {
                            // dB[n,k] = dCᵀ · A
                            S::gemm(n, m, k, ga, (1, n as isize), aa, (k as isize, 1), S::zero(), dst);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            S::gemm(k, m, n, aa, (1, k as isize), ga, (n as isize, 1), S::zero(), dst);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, stride } => {
                let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                let geo = ConvGeom::new(&tx.shape, tk.shape[0], *stride);
                let (wx, wk) = (self.wants(*x), self.wants(*k));
                let c9 = geo.c * 9;
                let hwo = geo.hw_out();
                let mut cols = vec![S::zero(); c9 * hwo];
                let mut dcols = vec![S::zero(); c9 * hwo];
                let mut dk = wk.then(|| vec![S::zero(); tk.numel()]);
                let mut dx = wx.then(|| vec![S::zero(); tx.numel()]);
                for bi in 0..geo.b {
                    let gb = &g[bi * geo.out_size()..(bi + 1) * geo.out_size()];
                    if let Some(dk) = dk.as_mut() {
                        geo.im2col(&tx.data[bi * geo.in_size()..(bi + 1) * geo.in_size()], &mut cols);
                        S::gemm(
                            geo.o,
                            hwo,
                            c9,
                            gb,
                            (hwo as isize, 1),
                            &cols,
                            (1, hwo as isize),
                            S::one(),
                            dk,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        S::gemm(
                            c9,
                            geo.o,
                            hwo,
                            &tk.data,
                            (1, c9 as isize),
                            gb,
                            (hwo as isize, 1),
                            S::zero(),
                            &mut dcols,
                        );
                        geo.col2im_add(&dcols, &mut dx[bi * geo.in_size()..(bi + 1) * geo.in_size()]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, dk);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor {
                    shape: out.shape.clone(),
                    data: g.to_vec(),
                };
                let back = gt.permute(&inv).expect("inverse permutation is valid");
                accumulate(grads, *x, back.data);
            }
            Op::SelectRows { x, rows } => {
                let tx = &self.nodes[x.0].value;
                let row = tx.numel() / tx.shape[0].max(1);
                let mut d = vec![S::zero(); tx.numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..row {
                        d[r * row + c] += g[j * row + c];
                    }
                }
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, d: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], o: usize, stride: usize) -> Self {
        let (h, w) = (x[2], x[3]);
        Self {
            b: x[0],
            c: x[1],
            h,
            w,
            o,
            stride,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
        }
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.o * self.hw_out()
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(1)?;
        let ix = (ox * self.stride + kx).checked_sub(1)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let hwo = self.hw_out();
        let plane = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(c * 9 + ky * 3 + kx) * hwo..][..hwo];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            row[oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some(p) => x[c * plane + p],
                                None => S::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let hwo = self.hw_out();
        let plane = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[(c * 9 + ky * 3 + kx) * hwo..][..hwo];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(p) = self.src(oy, ox, ky, kx) {
                                dx[c * plane + p] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
