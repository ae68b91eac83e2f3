use super::tensor::{axis_split, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-segment reductions used for per-frame pooling and grouped log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Mean,
    Max,
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pick(Var, Vec<usize>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Segment {
        x: Var,
        lens: Vec<usize>,
        kind: SegmentKind,
        // Max: winning row per output element; LogSumExp: softmax weights per input element.
        aux: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order; indices are
/// therefore a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite output of {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|p| p * c).collect())?;
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(row);
        if b.shape() != [n] {
            return Err(Error::shape(format!(
                "add_row: row {:?} for matrix [{m}, {n}]",
                b.shape()
            )));
        }
        let bd = b.data();
        let mut data = self.value(x).data().to_vec();
        for r in data.chunks_mut(n.max(1)) {
            for (o, &bv) in r.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                x.shape()
            )));
        }
        let out = x.clone().reshaped(shape.to_vec());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Selects rows (first-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rows = *x.shape().first().ok_or_else(|| Error::shape("gather_rows on scalar"))?;
        let width = if rows == 0 { 0 } else { x.numel() / rows };
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        self.push(Tensor::new(shape, data)?, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        if start + len > n {
            return Err(Error::shape(format!("narrow {start}+{len} > {n}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(shape, data)?, Op::Narrow { x: a, axis, start }, &[a])
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.numel();
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= n {
                return Err(Error::shape(format!("flat index {i} out of {n}")));
            }
            data.push(x.data()[i]);
        }
        self.push(Tensor::vector(data), Op::Pick(a, flat.to_vec()), &[a])
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        self.push(out, Op::Relu(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape("layer_norm gain/bias must match last axis"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = if d == 0 { 0 } else { x.numel() / d };
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = x.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[at(k)] /= s;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax { x: a, axis }, &[a])
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config("l2_normalize eps must be positive"));
        }
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let nrm = (0..n).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                norms[o * inner + i] = nrm;
                let denom = nrm.max(eps);
                for k in 0..n {
                    out[at(k)] = xd[at(k)] / denom;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::L2Normalize {
                x: a,
                axis,
                eps,
                norms,
            },
            &[a],
        )
    }

    /// Maximum along `axis`; ties resolve to the lowest position.
    pub fn max_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        if n == 0 {
            return Err(Error::shape("max over an empty axis"));
        }
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..n {
                    if xd[o * n * inner + k * inner + i] > xd[o * n * inner + best * inner + i] {
                        best = k;
                    }
                }
                out[o * inner + i] = xd[o * n * inner + best * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.push(
            Tensor::new(shape, out)?,
            Op::MaxAxis { x: a, axis, argmax },
            &[a],
        )
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        if n == 0 {
            return Err(Error::shape("mean over an empty axis"));
        }
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xd[o * n * inner + k * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis { x: a, axis }, &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reduces consecutive row groups of a matrix (rank-1 inputs are treated
    /// as a column). Group `s` covers `lens[s]` rows; empty groups yield
    /// zeros for `Mean`/`Max` and are rejected for `LogSumExp`.
    pub fn segment(&mut self, a: Var, lens: &[usize], kind: SegmentKind) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = match x.shape() {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("segment on {s:?}"))),
        };
        if lens.iter().sum::<usize>() != rows {
            return Err(Error::shape(format!(
                "segment lengths sum to {} for {rows} rows",
                lens.iter().sum::<usize>()
            )));
        }
        let xd = x.data();
        let mut out = vec![0.0; lens.len() * d];
        let mut aux = Vec::new();
        let mut start = 0;
        match kind {
            SegmentKind::Mean => {
                for (s, &len) in lens.iter().enumerate() {
                    for r in start..start + len {
                        for j in 0..d {
                            out[s * d + j] += xd[r * d + j];
                        }
                    }
                    if len > 0 {
                        for j in 0..d {
                            out[s * d + j] /= len as f64;
                        }
                    }
                    start += len;
                }
            }
            SegmentKind::Max => {
                aux = vec![-1.0; lens.len() * d];
                for (s, &len) in lens.iter().enumerate() {
                    for j in 0..d {
                        let mut best: Option<usize> = None;
                        for r in start..start + len {
                            if best.map_or(true, |b| xd[r * d + j] > xd[b * d + j]) {
                                best = Some(r);
                            }
                        }
                        if let Some(b) = best {
                            out[s * d + j] = xd[b * d + j];
                            aux[s * d + j] = b as f64;
                        }
                    }
                    start += len;
                }
            }
            SegmentKind::LogSumExp => {
                aux = vec![0.0; rows * d];
                for (s, &len) in lens.iter().enumerate() {
                    if len == 0 {
                        return Err(Error::shape("log-sum-exp over an empty segment"));
                    }
                    for j in 0..d {
                        let m = (start..start + len)
                            .map(|r| xd[r * d + j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for r in start..start + len {
                            let e = (xd[r * d + j] - m).exp();
                            aux[r * d + j] = e;
                            z += e;
                        }
                        for r in start..start + len {
                            aux[r * d + j] /= z;
                        }
                        out[s * d + j] = m + z.ln();
                    }
                    start += len;
                }
            }
        }
        let shape = if x.rank() == 1 {
            vec![lens.len()]
        } else {
            vec![lens.len(), d]
        };
        self.push(
            Tensor::new(shape, out)?,
            Op::Segment {
                x: a,
                lens: lens.to_vec(),
                kind,
                aux,
            },
            &[a],
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// node that requires them, visiting nodes in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "backward on a graph with no gradient-requiring inputs".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            // Interior gradients are dropped once propagated; only leaves are kept.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, gd));
                acc(*b, &mut |s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, gd));
                acc(*b, &mut |s| {
                    for (o, x) in s.iter_mut().zip(gd) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (o, x) in s.iter_mut().zip(gd) {
                    *o += c * x;
                }
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| add_into(s, gd));
                let n = self.value(*row).numel();
                acc(*row, &mut |s| {
                    for chunk in gd.chunks(n.max(1)) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| matmul_nt_acc(gd, bv, s, m, k, n));
                acc(*b, &mut |s| matmul_tn_acc(av, gd, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, gd)),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis)?;
                let mut offset = 0;
                for v in inputs {
                    let len = self.value(*v).shape()[*axis];
                    acc(*v, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut s[dst..dst + len * inner], &gd[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let width = if idx.is_empty() { 0 } else { gd.len() / idx.len() };
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * width..(i + 1) * width], &gd[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis)?;
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut s[dst..dst + len * inner], &gd[src..src + len * inner]);
                    }
                });
            }
            Op::Pick(a, flat) => acc(*a, &mut |s| {
                for (&i, &x) in flat.iter().zip(gd) {
                    s[i] += x;
                }
            }),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |s| {
                    for ((o, x), &inp) in s.iter_mut().zip(gd).zip(xv) {
                        if inp > 0.0 {
                            *o += x;
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
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |s| {
                    for (r, chunk) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            s[j] += chunk[j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for chunk in gd.chunks(d) {
                        add_into(s, chunk);
                    }
                });
                acc(*x, &mut |s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[r * d + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis)?;
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let dotp: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += y[at(k)] * (gd[at(k)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis)?;
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let nrm = norms[o * inner + i];
                            if nrm > *eps {
                                let dotp: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                                for k in 0..n {
                                    s[at(k)] += (gd[at(k)] - y[at(k)] * dotp) / nrm;
                                }
                            } else {
                                for k in 0..n {
                                    s[at(k)] += gd[at(k)] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis)?;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = argmax[o * inner + i];
                            s[o * n * inner + k * inner + i] += gd[o * inner + i];
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis)?;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                s[o * n * inner + k * inner + i] += gd[o * inner + i] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(*a, &mut |s| {
                    for o in s.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Segment { x, lens, kind, aux } => {
                let d = if lens.is_empty() { 1 } else { gd.len() / lens.len() };
                acc(*x, &mut |s| {
                    let mut start = 0;
                    for (seg, &len) in lens.iter().enumerate() {
                        for j in 0..d {
                            let go = gd[seg * d + j];
                            match kind {
                                SegmentKind::Mean => {
                                    for r in start..start + len {
                                        s[r * d + j] += go / len as f64;
                                    }
                                }
                                SegmentKind::Max => {
                                    if len > 0 {
                                        let r = aux[seg * d + j] as usize;
                                        s[r * d + j] += go;
                                    }
                                }
                                SegmentKind::LogSumExp => {
                                    for r in start..start + len {
                                        s[r * d + j] += go * aux[r * d + j];
                                    }
                                }
                            }
                        }
                        start += len;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::GatherRows(..) => "gather_rows",
        Op::Narrow { .. } => "narrow",
        Op::Pick(..) => "pick",
        Op::Relu(..) => "relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::MaxAxis { .. } => "max_pool",
        Op::MeanAxis { .. } => "mean",
        Op::Sum(..) => "sum",
        Op::Segment { .. } => "segment",
    }
}
