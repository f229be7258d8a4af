use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<F>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    SumSquares(Var),
    Nll {
        logits: Var,
        targets: Vec<(usize, usize)>,
        log_probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A differentiation tape. Nodes are appended in creation order, which is a
/// valid topological order for the backward pass.
#[derive(Debug)]
pub struct Graph<F> {
    id: usize,
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {v:?} does not belong to graph {}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.graph, self.id, "variable from a different graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self.id, index }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the trailing axis (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tb.shape()[0] != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(kernels::gelu);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// `|x|`, with derivative +1 taken at the kink.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(F::abs);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Abs(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        let mut line = vec![F::zero(); axis_len];
        let mut res = vec![F::zero(); axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..axis_len {
                    line[a] = src[(o * axis_len + a) * inner + i];
                }
                kernels::softmax_row(&line, &mut res);
                for a in 0..axis_len {
                    out[(o * axis_len + a) * inner + i] = res[a];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut out = vec![F::zero(); tx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, rs) = kernels::layer_norm_row(tx.row(r), tg.data(), tb.data(), eps, &mut out[r * d..(r + 1) * d]);
            rstd.push(rs);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Concatenation along the last axis; all parts share leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..end]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::shape("gather_rows", tx.shape(), &[]));
        }
        if rows.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let len = tx.shape()[0];
        let mut out = Vec::with_capacity(rows.len() * tx.cols());
        for &r in rows {
            if r >= len {
                return Err(Error::Lookup { index: r, len });
            }
            out.extend_from_slice(tx.row(r));
        }
        let value = Tensor::new(vec![rows.len(), tx.cols()], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Row lookup into an embedding table; gradients scatter back into the
    /// looked-up rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<F>();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(x), rg))
    }

    /// Summed negative log-likelihood `-Σ log softmax(logits[row])[col]` over
    /// the given `(row, col)` targets.
    pub fn nll(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        self.check(logits)?;
        let t = self.value(logits);
        if t.shape().len() != 2 {
            return Err(Error::shape("nll", t.shape(), &[]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut log_probs = vec![F::zero(); rows * cols];
        for r in 0..rows {
            kernels::log_softmax_row(t.row(r), &mut log_probs[r * cols..(r + 1) * cols]);
        }
        let mut total = F::zero();
        for &(r, c) in targets {
            if r >= rows || c >= cols {
                return Err(Error::Lookup {
                    index: r.max(c),
                    len: rows.min(cols),
                });
            }
            total = total - log_probs[r * cols + c];
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                log_probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Returns gradients for every node that
    /// requires one; leaves unreachable from `loss` get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![F::one()]);

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            graph: self.id,
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).unwrap()))
                .collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.index];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.index].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bv, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av, g, m, k, n, gb);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        acc(gv, g.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    acc(ga, g.iter().copied());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    acc(gb, g.iter().map(|&x| -x));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    acc(ga, g.iter().zip(bv).map(|(&x, &y)| x * y));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    acc(gb, g.iter().zip(av).map(|(&x, &y)| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, g.iter().copied());
                }
                let c = self.value(*bias).numel();
                if let Some(gb) = self.slot(grads, *bias) {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % c] = gb[i % c] + v;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, g.iter().map(|&v| v * *f));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, g.iter().zip(xv).map(|(&d, &v)| d * kernels::gelu_grad(v)));
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, g.iter().zip(xv).map(|(&d, &v)| if v < F::zero() { -d } else { d }));
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |a: usize| (o * axis_len + a) * inner + i;
                            let mut dotp = F::zero();
                            for a in 0..*axis_len {
                                dotp = dotp + g[idx(a)] * y[idx(a)];
                            }
                            for a in 0..*axis_len {
                                let k = idx(a);
                                gx[k] = gx[k] + y[k] * (g[k] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xt = self.value(*x);
                let gainv = self.value(*gain).data();
                let d = xt.cols();
                let rows = xt.rows();
                let n = F::lit(d as f64);
                let mut xhat = vec![F::zero(); d];
                let mut gx_all = vec![F::zero(); xt.numel()];
                let mut ggain = vec![F::zero(); d];
                let mut gbias = vec![F::zero(); d];
                for r in 0..rows {
                    let xr = xt.row(r);
                    let mean = xr.iter().copied().sum::<F>() / n;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd[r];
                    }
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gainv[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[j];
                        ggain[j] = ggain[j] + gr[j] * xhat[j];
                        gbias[j] = gbias[j] + gr[j];
                    }
                    mean_dxhat = mean_dxhat / n;
                    mean_dxhat_xhat = mean_dxhat_xhat / n;
                    for j in 0..d {
                        let dxh = gr[j] * gainv[j];
                        gx_all[r * d + j] = rstd[r] * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, gx_all.into_iter());
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    acc(gg, ggain.into_iter());
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    acc(gb, gbias.into_iter());
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * c + start + j] = gx[r * c + start + j] + g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + g[i * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    acc(gx, std::iter::repeat_n(g[0], n));
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let two = F::lit(2.0);
                    acc(gx, xv.iter().map(|&v| two * v * g[0]));
                }
            }
            Op::Nll {
                logits,
                targets,
                log_probs,
            } => {
                let cols = self.value(*logits).cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for &(r, c) in targets {
                        for j in 0..cols {
                            let p = log_probs[r * cols + j].exp();
                            gl[r * cols + j] = gl[r * cols + j] + g[0] * p;
                        }
                        gl[r * cols + c] = gl[r * cols + c] - g[0];
                    }
                }
            }
        }
    }
}

fn acc<F: Real>(dst: &mut [F], src: impl Iterator<Item = F>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    graph: usize,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        assert_eq!(v.graph, self.graph, "variable from a different graph");
        self.grads[v.index].as_ref()
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` was unreachable.
    pub fn wrt(&self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
