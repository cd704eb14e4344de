use super::kernels::{self, ConvGeom};
use super::{Tensor, MASK_CUTOFF};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    NarrowLast { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gap(Var),
    L2Normalize { x: Var, denom: Vec<f64>, clipped: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node sits after all of
/// its inputs and a single reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// `None` when `v` does not require gradients or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, rg, op)
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a `[d]` vector to every row of `x[..×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let d = tx.last_dim();
        if tr.rank() != 1 || tr.numel() != d {
            return Err(Error::Dimension { op: "add_row", lhs: tx.shape().to_vec(), rhs: tr.shape().to_vec() });
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, &r) in chunk.iter_mut().zip(tr.data()) {
                *v += r;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.map_unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = ta.matmul(tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Affine map `x[n×k] · w[k×m] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (n, k, m) = kernels::matmul_dims(tx.shape(), tw.shape()).map_err(|_| Error::Dimension {
            op: "linear",
            lhs: tx.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        })?;
        if tb.rank() != 1 || tb.numel() != m {
            return Err(Error::Dimension { op: "linear bias", lhs: tw.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(tb.data());
        }
        kernels::matmul_acc(tx.data(), tw.data(), &mut data, n, k, m);
        let out = Tensor::from_parts(vec![n, m], data);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Linear(x, w, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.transpose2()?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension { op: "concat_last", lhs: self.shape(*first).to_vec(), rhs: s.to_vec() });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::ConcatLast(parts.to_vec())))
    }

    /// Slice `[start, start+len)` of the trailing axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = t.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::Index { index: start + len, extent: d });
        }
        let data: Vec<f64> = t.data().chunks(d).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::NarrowLast { x, start }))
    }

    /// Gathers rows of a matrix; repeated indices accumulate in the backward pass.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::Contract(format!("select_rows expects a matrix, got {:?}", t.shape())));
        }
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no indices".into()));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, extent: n });
            }
            data.extend_from_slice(t.row(r));
        }
        let rg = self.rg(x);
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(out, rg, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.select_rows(table, ids)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    /// Adds scalars in order. Errors if `terms` is empty.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Contract("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Softmax over the trailing axis of `logits + mask`.
    ///
    /// `mask`, when given, must match a suffix of the logits' shape and is
    /// broadcast over the leading axes. Entries at or below the masking
    /// sentinel receive exactly zero weight; a row with every entry masked is
    /// an error rather than a NaN.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let n = t.last_dim();
        if let Some(m) = mask {
            let s = t.shape();
            if m.rank() > s.len() || s[s.len() - m.rank()..] != *m.shape() {
                return Err(Error::Dimension { op: "softmax_masked", lhs: s.to_vec(), rhs: m.shape().to_vec() });
            }
        }
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let mrow = mask.map(|m| {
                let mrows = m.numel() / n;
                m.row(r % mrows)
            });
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(mr) = mrow {
                    *v += mr[j];
                }
                let live = mrow.is_none_or(|mr| mr[j] > MASK_CUTOFF);
                if live && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut z = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                let live = mrow.is_none_or(|mr| mr[j] > MASK_CUTOFF);
                *v = if live { (*v - max).exp() } else { 0.0 };
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(logits);
        Ok(self.push(out, rg, Op::Softmax(logits)))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.softmax_masked(logits, None)
    }

    /// Per-row normalization over the trailing axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Dimension { op: "layer_norm", lhs: tx.shape().to_vec(), rhs: tg.shape().to_vec() });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Spatial mean of a `[C×H×W]` feature map.
    pub fn global_average_pool(&mut self, f: Var) -> Result<Var> {
        let t = &self.nodes[f.0].value;
        if t.rank() != 3 {
            return Err(Error::Contract(format!("global_average_pool expects C×H×W, got {:?}", t.shape())));
        }
        let c = t.shape()[0];
        let hw = t.shape()[1] * t.shape()[2];
        let data = t.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(f);
        Ok(self.push(Tensor::from_parts(vec![c], data), rg, Op::Gap(f)))
    }

    /// Divides each trailing-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        let mut denom = Vec::with_capacity(t.rows());
        let mut clipped = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = norm.max(eps);
            for v in row.iter_mut() {
                *v /= den;
            }
            denom.push(den);
            clipped.push(norm <= eps);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(out, rg, Op::L2Normalize { x, denom, clipped })
    }

    /// Weighted sum over rows of `-log softmax(logits_r)[target_r]`.
    ///
    /// `logits` is `[K]` (one row) or `[R×K]`. `weights` defaults to all ones.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let k = t.last_dim();
        let rows = t.rows();
        if targets.len() != rows {
            return Err(Error::Dimension { op: "cross_entropy", lhs: t.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let weights = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::Dimension {
                    op: "cross_entropy weights",
                    lhs: t.shape().to_vec(),
                    rhs: vec![w.len()],
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for r in 0..rows {
            let target = targets[r];
            if target >= k {
                return Err(Error::Index { index: target, extent: k });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - log_z).exp();
            }
            loss += weights[r] * (log_z - row[target]);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs }))
    }

    /// 2-D convolution of `x[C×H×W]` with `w[O×C×k×k]` plus bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let bad = || Error::Dimension { op: "conv2d", lhs: tx.shape().to_vec(), rhs: tw.shape().to_vec() };
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[0] || tw.shape()[2] != tw.shape()[3] {
            return Err(bad());
        }
        let o = tw.shape()[0];
        if tb.shape() != [o] {
            return Err(bad());
        }
        let s = tx.shape();
        let geom = ConvGeom::new(s[0], s[1], s[2], tw.shape()[2], stride, pad).ok_or_else(|| {
            Error::Input(format!("input {:?} smaller than the {}×{} kernel", s, tw.shape()[2], tw.shape()[2]))
        })?;
        let cols = kernels::im2col(tx.data(), &geom);
        let ncol = geom.col_cols();
        let mut out = Vec::with_capacity(o * ncol);
        for &bias in tb.data() {
            out.extend(std::iter::repeat_n(bias, ncol));
        }
        kernels::matmul_acc(tw.data(), &cols, &mut out, o, geom.col_rows(), ncol);
        let out = Tensor::from_parts(vec![o, geom.oh, geom.ow], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Reverse sweep from a one-element `loss`, filling gradients of every
    /// reachable node that requires them. Uses of a value accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a one-element loss, got shape {:?}", lt.shape())));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { nodes, grads } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_map(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(dst) = slot(nodes, grads, v) {
        for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, gi);
        }
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_map(nodes, grads, *a, g, |_, gi| gi);
            acc_map(nodes, grads, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            acc_map(nodes, grads, *a, g, |_, gi| gi);
            acc_map(nodes, grads, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |k, gi| gi * vb[k]);
            acc_map(nodes, grads, *b, g, |k, gi| gi * va[k]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |k, gi| gi / vb[k]);
            acc_map(nodes, grads, *b, g, |k, gi| -gi * va[k] / (vb[k] * vb[k]));
        }
        Op::Maximum(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |k, gi| if va[k] >= vb[k] { gi } else { 0.0 });
            acc_map(nodes, grads, *b, g, |k, gi| if va[k] >= vb[k] { 0.0 } else { gi });
        }
        Op::Minimum(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, g, |k, gi| if va[k] <= vb[k] { gi } else { 0.0 });
            acc_map(nodes, grads, *b, g, |k, gi| if va[k] <= vb[k] { 0.0 } else { gi });
        }
        Op::AddRow(x, row) => {
            acc_map(nodes, grads, *x, g, |_, gi| gi);
            if let Some(dst) = slot(nodes, grads, *row) {
                let d = dst.len();
                for chunk in g.chunks(d) {
                    for (a, &b) in dst.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
        }
        Op::Scale(x, s) => acc_map(nodes, grads, *x, g, |_, gi| gi * s),
        Op::Shift(x) | Op::Reshape(x) => acc_map(nodes, grads, *x, g, |_, gi| gi),
        Op::Relu(x) => {
            let vx = val(*x);
            acc_map(nodes, grads, *x, g, |k, gi| if vx[k] > 0.0 { gi } else { 0.0 });
        }
        Op::Sigmoid(x) => acc_map(nodes, grads, *x, g, |k, gi| gi * out[k] * (1.0 - out[k])),
        Op::Abs(x) => {
            let vx = val(*x);
            acc_map(nodes, grads, *x, g, |k, gi| {
                if vx[k] > 0.0 {
                    gi
                } else if vx[k] < 0.0 {
                    -gi
                } else {
                    0.0
                }
            });
        }
        Op::ClampMin(x, lo) => {
            let vx = val(*x);
            acc_map(nodes, grads, *x, g, |k, gi| if vx[k] > *lo { gi } else { 0.0 });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, vb, da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(va, g, db, m, k, n);
            }
        }
        Op::Linear(x, w, b) => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (n, k, m) = (sx[0], sx[1], sw[1]);
            let (vx, vw) = (val(*x), val(*w));
            if let Some(dx) = slot(nodes, grads, *x) {
                kernels::matmul_nt_acc(g, vw, dx, n, m, k);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                kernels::matmul_tn_acc(vx, g, dw, n, k, m);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for chunk in g.chunks(m) {
                    for (a, &c) in db.iter_mut().zip(chunk) {
                        *a += c;
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let s = nodes[i].value.shape();
            let gt = kernels::transpose(g, s[0], s[1]);
            acc_map(nodes, grads, *x, &gt, |_, gi| gi);
        }
        Op::ConcatLast(parts) => {
            let total = nodes[i].value.last_dim();
            let rows = g.len() / total;
            let mut off = 0;
            for &p in parts {
                let w = nodes[p.0].value.last_dim();
                if let Some(dst) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            dst[r * w + j] += g[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::NarrowLast { x, start } => {
            let d = nodes[x.0].value.last_dim();
            let len = nodes[i].value.last_dim();
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    for (j, &gv) in gr.iter().enumerate() {
                        dst[r * d + start + j] += gv;
                    }
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let d = nodes[x.0].value.last_dim();
            if let Some(dst) = slot(nodes, grads, *x) {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dst[r * d + j] += g[k * d + j];
                    }
                }
            }
        }
        Op::Sum(x) => acc_map(nodes, grads, *x, &vec![g[0]; nodes[x.0].value.numel()], |_, gi| gi),
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            acc_map(nodes, grads, *x, &vec![g[0] / n as f64; n], |_, gi| gi);
        }
        Op::Softmax(x) => {
            let n = nodes[i].value.last_dim();
            if let Some(dst) = slot(nodes, grads, *x) {
                for ((y, gy), d) in out.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
                    let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] += y[j] * (gy[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = nodes[i].value.last_dim();
            let vg = val(*gain);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * vg[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * vg[j];
                        dx[r * d + j] += rs * (dh - m1 - hr[j] * m2);
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (k, &gv) in g.iter().enumerate() {
                    dg[k % d] += gv * xhat[k];
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for (k, &gv) in g.iter().enumerate() {
                    db[k % d] += gv;
                }
            }
        }
        Op::Gap(f) => {
            let s = nodes[f.0].value.shape();
            let hw = s[1] * s[2];
            if let Some(dst) = slot(nodes, grads, *f) {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += g[k / hw] / hw as f64;
                }
            }
        }
        Op::L2Normalize { x, denom, clipped } => {
            let d = nodes[i].value.last_dim();
            if let Some(dst) = slot(nodes, grads, *x) {
                for (r, (&den, &clip)) in denom.iter().zip(clipped).enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = if clip { 0.0 } else { y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() };
                    for j in 0..d {
                        dst[r * d + j] += (gr[j] - y[j] * proj) / den;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let k = nodes[logits.0].value.last_dim();
            if let Some(dst) = slot(nodes, grads, *logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dst[r * k + j] += g[0] * w * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let o = nodes[w.0].value.shape()[0];
            let ncol = geom.col_cols();
            let nrow = geom.col_rows();
            if let Some(db) = slot(nodes, grads, *b) {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += g[oc * ncol..(oc + 1) * ncol].iter().sum::<f64>();
                }
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                kernels::matmul_nt_acc(g, cols, dw, o, ncol, nrow);
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![0.0; nrow * ncol];
                kernels::matmul_tn_acc(val(*w), g, &mut dcols, o, nrow, ncol);
                if let Some(dx) = slot(nodes, grads, *x) {
                    kernels::col2im_acc(&dcols, geom, dx);
                }
            }
        }
    }
}
