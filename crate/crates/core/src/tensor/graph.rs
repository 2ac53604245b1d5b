//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. Nodes whose inputs
//! carry no gradient are marked inert and skipped by [`Graph::backward`].
//! Subgradients at the kinks of `relu`, `abs` and `clamp_min` are 0.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Op kinds, used for diagnostics and for fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d,
    Relu,
    Sqrt,
    Abs,
    Scale,
    ClampMin,
    Sum,
    Mean,
    Variance,
    Broadcast,
    Reshape,
    Gap,
    SoftmaxCrossEntropy,
    L2Normalize,
    Concat,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sqrt(Var),
    Abs(Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Variance { x: Var, mean: Vec<f64> },
    Broadcast(Var),
    Reshape(Var),
    Gap(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Abs(_) => OpKind::Abs,
            Op::Scale(..) => OpKind::Scale,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Variance { .. } => OpKind::Variance,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Gap(_) => OpKind::Gap,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Concat { .. } => OpKind::Concat,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations so that gradients can be pulled back from a
/// scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Test fixture: scales every gradient routed through `kind` by 1.5 so
    /// that oracle checks have a negative control.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Graph {
            fault: Some(kind),
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let id = self.nodes.len();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "node {id} ({:?}) produced a non-finite value",
                op.kind()
            )));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Relu(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::ClampMin(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Broadcast(x)
            | Op::Reshape(x)
            | Op::Gap(x) => vec![*x],
            Op::Variance { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::Shape(format!("{kind:?}: cannot broadcast {sa:?} with {sb:?}")))?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let st_a = broadcast_strides(&sa, &out_shape);
            let st_b = broadcast_strides(&sb, &out_shape);
            for_each_index(&out_shape, &st_a, &st_b, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            OpKind::Mul => Op::Mul(a, b),
            OpKind::Div => Op::Div(a, b),
            _ => unreachable!("not a binary op"),
        };
        self.push(op, out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Div, |x, y| x / y)
    }

    // ---- elementwise unary ops ----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), self.shape(x).to_vec(), data)
    }

    /// Square root; the input must be strictly positive so the derivative exists.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Numerics(format!(
                "sqrt of non-positive value {v} at node {}",
                x.0
            )));
        }
        let data = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt(x), self.shape(x).to_vec(), data)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.abs()).collect();
        self.push(Op::Abs(x), self.shape(x).to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        self.push(Op::Scale(x, factor), self.shape(x).to_vec(), data)
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(min)).collect();
        self.push(Op::ClampMin(x, min), self.shape(x).to_vec(), data)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let data = t.into_data();
        self.push(Op::Reshape(x), shape.to_vec(), data)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::Shape(format!("cannot broadcast {sx:?} to {shape:?}")));
            }
        }
        let data = expand(self.value(x).data(), &sx, shape);
        self.push(Op::Broadcast(x), shape.to_vec(), data)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block: usize = self.shape(v)[axis..].iter().product();
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out_shape,
            data,
        )
    }

    // ---- reductions (keep reduced axes with extent 1) ----

    fn reduced_shape(&self, x: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let mut s = self.shape(x).to_vec();
        for &a in axes {
            if a >= s.len() {
                return Err(Error::Shape(format!("axis {a} out of range for {s:?}")));
            }
            s[a] = 1;
        }
        Ok(s)
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduced_shape(x, axes)?;
        let data = reduce(self.value(x).data(), self.shape(x), &out);
        self.push(Op::Sum(x), out, data)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), vec![], vec![total])
    }

    /// Mean over `axes`, keeping them with extent 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduced_shape(x, axes)?;
        let count = (self.value(x).len() / out.iter().product::<usize>().max(1)) as f64;
        let data = reduce(self.value(x).data(), self.shape(x), &out)
            .into_iter()
            .map(|v| v / count)
            .collect();
        self.push(Op::Mean(x), out, data)
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), vec![], vec![m])
    }

    /// Population variance over `axes` (divides by the element count).
    pub fn variance_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduced_shape(x, axes)?;
        let shape = self.shape(x).to_vec();
        let xs = self.value(x).data();
        let count = (xs.len() / out.iter().product::<usize>().max(1)) as f64;
        let mean: Vec<f64> = reduce(xs, &shape, &out).into_iter().map(|v| v / count).collect();
        let mean_full = expand(&mean, &out, &shape);
        let sq: Vec<f64> = xs
            .iter()
            .zip(&mean_full)
            .map(|(v, m)| (v - m) * (v - m))
            .collect();
        let data = reduce(&sq, &shape, &out).into_iter().map(|v| v / count).collect();
        self.push(Op::Variance { x, mean }, out, data)
    }

    /// Global average pooling: `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("gap expects rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        if hw == 0 {
            return Err(Error::Shape("gap over empty spatial extent".into()));
        }
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::Gap(x), vec![s[0], s[1]], data)
    }

    // ---- contractions ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    /// 2-D cross-correlation with zero padding. `input: [B, Cin, H, W]`,
    /// `weight: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects rank-4 operands, got {si:?} and {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                si[1], sw[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let geo = ConvGeometry::new(&si, &sw, stride, padding)?;
        let out = geo.forward(self.value(input).data(), self.value(weight).data());
        self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            vec![geo.batch, geo.cout, geo.oh, geo.ow],
            out,
        )
    }

    // ---- composite heads ----

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![],
            vec![loss / b as f64],
        )
    }

    /// Scales each slice along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::Shape("l2_normalize on a scalar".into()))?;
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(xs.len() / d.max(1));
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::Numerics(format!(
                    "l2_normalize of a zero-norm row at node {}",
                    x.0
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push(Op::L2Normalize { x, norms }, s, out)
    }

    /// `sum(|a - b|)` as a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.sum(d)
    }

    // ---- backward ----

    /// Pulls gradients back from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
        let out_shape = node.value.shape();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c * factor;
                    }
                }
                slot @ None => {
                    *slot = Some(if factor == 1.0 {
                        contrib
                    } else {
                        contrib.into_iter().map(|c| c * factor).collect()
                    });
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce(g, out_shape, self.shape(*a)));
                send(*b, reduce(g, out_shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce(g, out_shape, self.shape(*a)));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, reduce(&neg, out_shape, self.shape(*b)));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let xa = expand(self.value(*a).data(), sa, out_shape);
                let xb = expand(self.value(*b).data(), sb, out_shape);
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = if is_div {
                        g.iter().zip(&xb).map(|(g, y)| g / y).collect()
                    } else {
                        g.iter().zip(&xb).map(|(g, y)| g * y).collect()
                    };
                    send(*a, reduce(&ga, out_shape, sa));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = if is_div {
                        g.iter()
                            .zip(xa.iter().zip(&xb))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect()
                    } else {
                        g.iter().zip(&xa).map(|(g, x)| g * x).collect()
                    };
                    send(*b, reduce(&gb, out_shape, sb));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = g[i * n..(i + 1) * n]
                                .iter()
                                .zip(&db[p * n..(p + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight), *stride, *padding)
                    .expect("geometry validated in forward");
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                if self.requires_grad(*input) {
                    send(*input, geo.grad_input(g, w));
                }
                if self.requires_grad(*weight) {
                    send(*weight, geo.grad_weight(g, x));
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                send(*x, g.iter().zip(xs).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sqrt(x) => {
                let ys = node.value.data();
                send(*x, g.iter().zip(ys).map(|(g, y)| g * 0.5 / y).collect());
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &v)| {
                            if v > 0.0 {
                                *g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::ClampMin(x, min) => {
                let xs = self.value(*x).data();
                send(*x, g.iter().zip(xs).map(|(g, &v)| if v > *min { *g } else { 0.0 }).collect());
            }
            Op::Sum(x) | Op::Broadcast(x) | Op::Mean(x) => {
                let sx = self.shape(*x);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    out_shape.iter().product::<usize>() as f64 / self.value(*x).len() as f64
                } else {
                    1.0
                };
                let gv = if matches!(node.op, Op::Broadcast(_)) {
                    reduce(g, out_shape, sx)
                } else {
                    // scalar outputs have an empty shape; treat as all-ones
                    let small = if out_shape.is_empty() { vec![1; sx.len()] } else { out_shape.to_vec() };
                    expand(g, &small, sx)
                };
                send(*x, gv.into_iter().map(|v| v * scale).collect());
            }
            Op::Variance { x, mean } => {
                let sx = self.shape(*x);
                let count = self.value(*x).len() as f64 / out_shape.iter().product::<usize>() as f64;
                let gfull = expand(g, out_shape, sx);
                let mfull = expand(mean, out_shape, sx);
                let xs = self.value(*x).data();
                send(
                    *x,
                    gfull
                        .iter()
                        .zip(xs.iter().zip(&mfull))
                        .map(|(g, (v, m))| g * 2.0 * (v - m) / count)
                        .collect(),
                );
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Gap(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                send(*x, gx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * c + y] -= g[0] / b;
                }
                send(*logits, gl);
            }
            Op::L2Normalize { x, norms } => {
                let d = *out_shape.last().expect("rank >= 1");
                let ys = node.value.data();
                let mut gx = Vec::with_capacity(ys.len());
                for ((yr, gr), n) in ys.chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
                }
                send(*x, gx);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let out_block: usize = out_shape[*axis..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let block: usize = self.shape(v)[*axis..].iter().product();
                    let mut gv = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * out_block + offset;
                        gv.extend_from_slice(&g[start..start + block]);
                    }
                    offset += block;
                    send(v, gv);
                }
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(si: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (h, w, kh, kw) = (si[2], si[3], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            batch: si[0],
            cin: si[1],
            h,
            w,
            cout: sw[0],
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Valid output-column range for kernel column `kx`, with the matching
    /// first input column.
    fn col_span(&self, kx: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // ix = ox*s + kx - p must lie in [0, w)
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.ow) } else { 0 };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + kx - p)
    }

    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        (iy < self.h).then_some(iy)
    }

    fn forward(&self, x: &[f64], wt: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.cout * self.oh * self.ow];
        let plane = self.h * self.w;
        for b in 0..self.batch {
            for co in 0..self.cout {
                let obase = (b * self.cout + co) * self.oh * self.ow;
                for ci in 0..self.cin {
                    let ibase = (b * self.cin + ci) * plane;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = wt[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                            let (lo, hi, ix0) = self.col_span(kx);
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let orow = obase + oy * self.ow;
                                let irow = ibase + iy * self.w;
                                for (j, ox) in (lo..hi).enumerate() {
                                    out[orow + ox] += wv * x[irow + ix0 + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn grad_input(&self, g: &[f64], wt: &[f64]) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut gx = vec![0.0; self.batch * self.cin * plane];
        for b in 0..self.batch {
            for co in 0..self.cout {
                let obase = (b * self.cout + co) * self.oh * self.ow;
                for ci in 0..self.cin {
                    let ibase = (b * self.cin + ci) * plane;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = wt[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                            let (lo, hi, ix0) = self.col_span(kx);
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let orow = obase + oy * self.ow;
                                let irow = ibase + iy * self.w;
                                for (j, ox) in (lo..hi).enumerate() {
                                    gx[irow + ix0 + j * self.stride] += wv * g[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn grad_weight(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut gw = vec![0.0; self.cout * self.cin * self.kh * self.kw];
        for b in 0..self.batch {
            for co in 0..self.cout {
                let obase = (b * self.cout + co) * self.oh * self.ow;
                for ci in 0..self.cin {
                    let ibase = (b * self.cin + ci) * plane;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let (lo, hi, ix0) = self.col_span(kx);
                            let mut acc = 0.0;
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let orow = obase + oy * self.ow;
                                let irow = ibase + iy * self.w;
                                for (j, ox) in (lo..hi).enumerate() {
                                    acc += x[irow + ix0 + j * self.stride] * g[orow + ox];
                                }
                            }
                            gw[((co * self.cin + ci) * self.kh + ky) * self.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        gw
    }
}

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid over `out` axes, zero where `shape` is broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_index(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Repeats `data` (shape `small`) across the broadcast axes of `big`.
fn expand(data: &[f64], small: &[usize], big: &[usize]) -> Vec<f64> {
    if small == big {
        return data.to_vec();
    }
    let st = broadcast_strides(small, big);
    let zero = vec![0; big.len()];
    let mut out = vec![0.0; big.iter().product()];
    for_each_index(big, &st, &zero, |o, i, _| out[o] = data[i]);
    out
}

/// Sums `data` (shape `big`) down onto the broadcast shape `small`.
fn reduce(data: &[f64], big: &[usize], small: &[usize]) -> Vec<f64> {
    if small == big {
        return data.to_vec();
    }
    let st = broadcast_strides(small, big);
    let zero = vec![0; big.len()];
    let mut out = vec![0.0; small.iter().product::<usize>().max(1)];
    for_each_index(big, &st, &zero, |o, i, _| out[i] += data[o]);
    out
}
