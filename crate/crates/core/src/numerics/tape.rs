//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the pullback. Inputs always precede outputs, so a single reverse
//! sweep over the node list visits each entry once in a valid order.

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
    /// tanh approximation of GELU
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    ScaleRows { x: Var, scale: Var },
    Affine { x: Var, alpha: f64 },
    Act { kind: Activation, x: Var },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// dLoss/dVar, or `None` when the node does not require grad.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of leaves that require grad.
    pub fn trainable_leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    /// Records a leaf that copies `t`'s values and inherits its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push_raw(value, Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a · b` where `b` is a matrix and `a` has trailing extent equal to `b`'s rows.
    /// Leading extents of `a` are treated as independent rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let out = transpose_raw(self.data(x), s[0], s[1]);
        self.push("transpose", vec![s[1], s[0]], out, Op::Transpose(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let shape = self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.push("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let shape = self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.push("sub", shape, out, Op::Sub(a, b), &[a, b])
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let shape = self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let c = self.value(x).cols();
        if sx.is_empty() || sb != [c] {
            return Err(NumericsError::Shape {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(u, w)| u + w))
            .collect();
        self.push("add_row", sx, out, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Multiplies row `r` of `x` by the scalar `scale[r]`. `scale` holds one entry per row.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var, NumericsError> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(scale).to_vec());
        let rows = self.value(x).rows();
        let c = self.value(x).cols();
        if self.value(scale).len() != rows {
            return Err(NumericsError::Shape {
                op: "scale_rows",
                lhs: sx,
                rhs: ss,
            });
        }
        let s = self.data(scale);
        let mut out = self.data(x).to_vec();
        for (r, chunk) in out.chunks_mut(c.max(1)).enumerate().take(rows) {
            chunk.iter_mut().for_each(|u| *u *= s[r]);
        }
        self.push("scale_rows", sx, out, Op::ScaleRows { x, scale }, &[x, scale])
    }

    /// `alpha * x + beta`, element-wise.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|u| alpha * u + beta).collect();
        self.push("affine", shape, out, Op::Affine { x, alpha }, &[x])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&u| kind.apply(u)).collect();
        self.push("activation", shape, out, Op::Act { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(Activation::Tanh, x)
    }

    /// Concatenation along the trailing dimension. Leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(NumericsError::Shape {
                op: "concat",
                lhs: lead,
                rhs: vec![],
            });
        }
        let lead = lead[..lead.len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(NumericsError::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.value(p).cols();
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        let c = self.value(x).cols();
        if s.is_empty() || start + len > c {
            return Err(NumericsError::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let out = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push("slice_cols", shape, out, Op::SliceCols { x, start }, &[x])
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(NumericsError::Index {
                op: "slice_rows",
                index: start + len,
                bound: s.first().copied().unwrap_or(0),
            });
        }
        let c = s[1];
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", vec![len, c], out, Op::SliceRows { x, start }, &[x])
    }

    /// Row-wise softmax of a square score matrix with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(NumericsError::Shape {
                op: "causal_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let n = s[0];
        let xs = self.data(x);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &xs[i * n..i * n + i + 1];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] /= z;
            }
        }
        self.push("causal_softmax", s, out, Op::CausalSoftmax(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        let c = self.value(x).cols();
        for p in [gain, bias] {
            if sx.is_empty() || self.shape(p) != [c] {
                return Err(NumericsError::Shape {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * c);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for row in self.data(x).chunks(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, u) in row.iter().enumerate() {
                let xh = (u - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", sx, out, op, &[x, gain, bias])
    }

    /// Selects rows of a `[n × d]` table by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let d = s[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(NumericsError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: s[0],
                });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", vec![ids.len(), d], out, op, &[table])
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    ///
    /// `logits` is `[V]` (one target) or `[rows × V]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if t.rank() == 0 || targets.len() != rows || v == 0 {
            return Err(NumericsError::Shape {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = t.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|u| (u - mx).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - mx).exp() / z;
            }
            if let Some(k) = *target {
                if k >= v {
                    return Err(NumericsError::Index {
                        op: "softmax_cross_entropy",
                        index: k,
                        bound: v,
                    });
                }
                total += z.ln() - (row[k] - mx);
                count += 1;
            }
        }
        if count == 0 {
            return Err(NumericsError::Contract(
                "softmax_cross_entropy with no supervised rows".into(),
            ));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push("softmax_cross_entropy", vec![], vec![total / count as f64], op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let total = self.data(x).iter().sum();
        self.push("sum", vec![], vec![total], Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf that requires grad receives an entry, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            let Some(g) = grads[k].take() else {
                continue;
            };
            self.pullback(node, &g, &mut grads);
            grads[k] = Some(g);
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[k].is_none() {
                grads[k] = Some(vec![0.0; node.value.len()]);
            } else if !node.requires_grad {
                grads[k] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn pullback(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).rows();
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let back = transpose_raw(g, s[0], s[1]);
                self.accumulate(grads, *x, |dx| add_into(dx, &back));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(u, w)| *u -= w));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let c = node.value.cols();
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(c.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleRows { x, scale } => {
                let c = node.value.cols().max(1);
                let (xd, sd) = (self.data(*x), self.data(*scale));
                self.accumulate(grads, *x, |d| {
                    for (r, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (u, w) in drow.iter_mut().zip(grow) {
                            *u += w * sd[r];
                        }
                    }
                });
                self.accumulate(grads, *scale, |d| {
                    for (r, (xrow, grow)) in xd.chunks(c).zip(g.chunks(c)).enumerate() {
                        d[r] += xrow.iter().zip(grow).map(|(u, w)| u * w).sum::<f64>();
                    }
                });
            }
            Op::Affine { x, alpha } => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(u, w)| *u += alpha * w)
                });
            }
            Op::Act { kind, x } => {
                let (xd, yd) = (self.data(*x), node.value.data());
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kind.derivative(xd[i], yd[i]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.accumulate(grads, *p, |d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            add_into(&mut d[r * c..(r + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c_in = self.value(*x).cols();
                let c_out = node.value.cols();
                self.accumulate(grads, *x, |d| {
                    if c_out == 0 {
                        return;
                    }
                    for (r, grow) in g.chunks(c_out).enumerate() {
                        add_into(&mut d[r * c_in + start..r * c_in + start + c_out], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::CausalSoftmax(x) => {
                let n = node.value.shape()[0];
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..n {
                        let dot: f64 = (0..=i).map(|j| g[i * n + j] * y[i * n + j]).sum();
                        for j in 0..=i {
                            d[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = self.data(*gain);
                self.accumulate(grads, *gain, |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let cf = c as f64;
                    for (r, (grow, xrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[j];
                        }
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            d[r * c + j] +=
                                inv_std[r] / cf * (cf * dxh - sum_dxh - xrow[j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.cols();
                self.accumulate(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |d| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(k) = *target else { continue };
                        for j in 0..v {
                            d[r * v + j] += scale * probs[r * v + j];
                        }
                        d[r * v + k] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|u| *u += g[0]));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(u, w)| *u += w);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
