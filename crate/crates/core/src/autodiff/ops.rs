use std::rc::Rc;

use super::{NodesView, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.rows_cols();
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<'t> Var<'t> {
    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let req = self.requires_grad();
        self.tape.push_node(Rc::new(value), req, op)
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Result<Var<'t>> {
        self.tape.check(&other)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push_node(Rc::new(value), req, op))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let out = gemm(&self.value(), ta, &other.value(), tb)?;
        self.binary(
            other,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            out,
        )
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(op, &a, &b));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        self.binary(other, Op::Add(self.id, other.id), a.zip_map(&b, |x, y| x + y))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        self.binary(other, Op::Sub(self.id, other.id), a.zip_map(&b, |x, y| x - y))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        self.binary(other, Op::Mul(self.id, other.id), a.zip_map(&b, |x, y| x * y))
    }

    /// Adds a length-`cols` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        if r.len() != c {
            return Err(mismatch("add_row", &a, &r));
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        self.binary(row, Op::AddRow { a: self.id, row: row.id }, out)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        if r.len() != c {
            return Err(mismatch("mul_row", &a, &r));
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v *= b;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        self.binary(row, Op::MulRow { a: self.id, row: row.id }, out)
    }

    /// Scales row `i` by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, k) = (self.value(), col.value());
        let (r, c) = a.rows_cols();
        if k.len() != r {
            return Err(mismatch("mul_col", &a, &k));
        }
        let mut out = a.data().to_vec();
        for (i, chunk) in out.chunks_mut(c).enumerate() {
            let s = k.data()[i];
            for v in chunk.iter_mut() {
                *v *= s;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        self.binary(col, Op::MulCol { a: self.id, col: col.id }, out)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn sin(self) -> Var<'t> {
        let v = self.value().map(f64::sin);
        self.unary(Op::Sin(self.id), v)
    }

    pub fn cos(self) -> Var<'t> {
        let v = self.value().map(f64::cos);
        self.unary(Op::Cos(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), v)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(Op::Gelu(self.id), v)
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(Op::Silu(self.id), v)
    }

    pub fn softmax_lastdim(self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.unary(Op::Softmax(self.id), v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(Op::Mean(self.id), v)
    }

    /// Column sums of a 2-D view, shape `[1, cols]`.
    pub fn sum_rows(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(a.row(i)) {
                *o += x;
            }
        }
        self.unary(Op::SumRows(self.id), Tensor::from_parts(vec![1, c], out))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose2();
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Columns `start..end` of a 2-D view.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if start >= end || end > c {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: a.shape().to_vec(),
                reason: format!("range {start}..{end}"),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&a.row(i)[start..end]);
        }
        Ok(self.unary(
            Op::Slice {
                a: self.id,
                cols: true,
                start,
            },
            Tensor::from_parts(vec![r, w], out),
        ))
    }

    /// Rows `start..end` of a 2-D view.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let r = a.rows();
        if start >= end || end > r {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: a.shape().to_vec(),
                reason: format!("range {start}..{end}"),
            });
        }
        Ok(self.unary(
            Op::Slice {
                a: self.id,
                cols: false,
                start,
            },
            a.slice_rows(start, end),
        ))
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: a.shape().to_vec(),
                reason: format!("indices out of range ({} rows)", r),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(a.row(i));
        }
        Ok(self.unary(
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            Tensor::from_parts(vec![idx.len(), c], out),
        ))
    }

    /// Scatter-add rows into a zero `[n_rows, cols]` matrix.
    pub fn scatter_rows(self, idx: &[usize], n_rows: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if idx.len() != r || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::InvalidShape {
                op: "scatter_rows",
                shape: a.shape().to_vec(),
                reason: format!("{} indices for {} rows into {}", idx.len(), r, n_rows),
            });
        }
        let mut out = vec![0.0; n_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(a.row(k)) {
                *o += x;
            }
        }
        Ok(self.unary(
            Op::ScatterRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            Tensor::from_parts(vec![n_rows, c], out),
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        let (g, b) = (gain.value(), bias.value());
        if g.len() != c || b.len() != c {
            return Err(mismatch("layer_norm", &a, &g));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = a.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let req = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.check(&gain)?;
        self.tape.check(&bias)?;
        Ok(self.tape.push_node(
            Rc::new(Tensor::from_parts(a.shape().to_vec(), out)),
            req,
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Tensor::from_parts(vec![r, c], xhat),
                inv_std,
            },
        ))
    }

    /// Weighted mean token cross-entropy over rows of `self` (logits).
    /// Rows with zero weight contribute nothing; returns 0 when all weights
    /// are zero.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if targets.len() != r || weights.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: a.shape().to_vec(),
                reason: format!("{} targets / {} weights", targets.len(), weights.len()),
            });
        }
        let probs = softmax_rows(&Tensor::from_parts(vec![r, c], a.data().to_vec()));
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for i in 0..r {
                if weights[i] != 0.0 {
                    loss -= weights[i] * probs.at2(i, targets[i]).max(1e-300).ln();
                }
            }
            loss /= total;
        }
        Ok(self.unary(
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }
}

/// Concatenate along the last axis (2-D views with equal row counts).
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
    let tape = first.tape;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let r = vals[0].rows();
    for (p, v) in parts.iter().zip(&vals) {
        tape.check(p)?;
        if v.rows() != r {
            return Err(mismatch("concat_cols", &vals[0], v));
        }
    }
    let c: usize = vals.iter().map(|v| v.cols()).sum();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for v in &vals {
            out.extend_from_slice(v.row(i));
        }
    }
    let req = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push_node(
        Rc::new(Tensor::from_parts(vec![r, c], out)),
        req,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            cols: true,
        },
    ))
}

/// Concatenate along the first axis (2-D views with equal column counts).
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
    let tape = first.tape;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let c = vals[0].cols();
    for (p, v) in parts.iter().zip(&vals) {
        tape.check(p)?;
        if v.cols() != c {
            return Err(mismatch("concat_rows", &vals[0], v));
        }
    }
    let r: usize = vals.iter().map(|v| v.rows()).sum();
    let mut out = Vec::with_capacity(r * c);
    for v in &vals {
        out.extend_from_slice(v.data());
    }
    let req = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push_node(
        Rc::new(Tensor::from_parts(vec![r, c], out)),
        req,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            cols: false,
        },
    ))
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    g.zip_map(x, f)
}

/// Parent gradients for one node.
pub(super) fn backward_op(
    nodes: &NodesView<'_>,
    op: &Op,
    out: &Tensor,
    g: &Tensor,
) -> Vec<(usize, Tensor)> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (nodes.value(*a), nodes.value(*b));
            let mut res = Vec::with_capacity(2);
            if nodes.requires(*a) {
                // C = op(A) op(B); dop(A) = G op(B)^T
                let ga = if *ta {
                    gemm(bv, *tb, g, true).expect("matmul grad")
                } else {
                    gemm(g, false, bv, !*tb).expect("matmul grad")
                };
                res.push((*a, ga));
            }
            if nodes.requires(*b) {
                let gb = if *tb {
                    gemm(g, true, av, *ta).expect("matmul grad")
                } else {
                    gemm(av, !*ta, g, false).expect("matmul grad")
                };
                res.push((*b, gb));
            }
            res
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let (av, bv) = (nodes.value(*a), nodes.value(*b));
            vec![(*a, g.zip_map(bv, |x, y| x * y)), (*b, g.zip_map(av, |x, y| x * y))]
        }
        Op::AddRow { a, row } => {
            let c = g.cols();
            let mut gr = vec![0.0; c];
            for chunk in g.data().chunks(c) {
                for (o, x) in gr.iter_mut().zip(chunk) {
                    *o += x;
                }
            }
            let rshape = nodes.value(*row).shape().to_vec();
            vec![(*a, g.clone()), (*row, Tensor::from_parts(rshape, gr))]
        }
        Op::MulRow { a, row } => {
            let (av, rv) = (nodes.value(*a), nodes.value(*row));
            let c = g.cols();
            let mut ga = g.data().to_vec();
            let mut gr = vec![0.0; c];
            for (i, chunk) in ga.chunks_mut(c).enumerate() {
                let arow = av.row(i);
                for j in 0..c {
                    gr[j] += chunk[j] * arow[j];
                    chunk[j] *= rv.data()[j];
                }
            }
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*row, Tensor::from_parts(rv.shape().to_vec(), gr)),
            ]
        }
        Op::MulCol { a, col } => {
            let (av, kv) = (nodes.value(*a), nodes.value(*col));
            let c = g.cols();
            let mut ga = g.data().to_vec();
            let mut gk = vec![0.0; kv.len()];
            for (i, chunk) in ga.chunks_mut(c).enumerate() {
                let s = kv.data()[i];
                let arow = av.row(i);
                let mut acc = 0.0;
                for j in 0..c {
                    acc += chunk[j] * arow[j];
                    chunk[j] *= s;
                }
                gk[i] = acc;
            }
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*col, Tensor::from_parts(kv.shape().to_vec(), gk)),
            ]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, elementwise(g, out, |gx, y| gx * y))],
        Op::Log(a) => vec![(*a, elementwise(g, nodes.value(*a), |gx, x| gx / x))],
        Op::Sin(a) => vec![(*a, elementwise(g, nodes.value(*a), |gx, x| gx * x.cos()))],
        Op::Cos(a) => vec![(*a, elementwise(g, nodes.value(*a), |gx, x| -gx * x.sin()))],
        Op::Sigmoid(a) => vec![(*a, elementwise(g, out, |gx, y| gx * y * (1.0 - y)))],
        Op::Tanh(a) => vec![(*a, elementwise(g, out, |gx, y| gx * (1.0 - y * y)))],
        Op::Gelu(a) => vec![(*a, elementwise(g, nodes.value(*a), |gx, x| gx * gelu_grad(x)))],
        Op::Silu(a) => vec![(
            *a,
            elementwise(g, nodes.value(*a), |gx, x| {
                let s = sigmoid(x);
                gx * (s + x * s * (1.0 - s))
            }),
        )],
        Op::Softmax(a) => {
            let (r, c) = out.rows_cols();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let y = out.row(i);
                let gy = g.row(i);
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    ga[i * c + j] = y[j] * (gy[j] - dot);
                }
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), ga))]
        }
        Op::Sum(a) => {
            let av = nodes.value(*a);
            vec![(*a, Tensor::full(av.shape(), g.item()))]
        }
        Op::Mean(a) => {
            let av = nodes.value(*a);
            vec![(*a, Tensor::full(av.shape(), g.item() / av.len() as f64))]
        }
        Op::SumRows(a) => {
            let av = nodes.value(*a);
            let (r, c) = av.rows_cols();
            let mut ga = Vec::with_capacity(r * c);
            for _ in 0..r {
                ga.extend_from_slice(g.data());
            }
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), ga))]
        }
        Op::Concat { parts, cols } => {
            let mut res = Vec::with_capacity(parts.len());
            if *cols {
                let (r, c) = g.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let pv = nodes.value(p);
                    let w = pv.cols();
                    if nodes.requires(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * c + off..i * c + off + w]);
                        }
                        res.push((p, Tensor::from_parts(pv.shape().to_vec(), gp)));
                    }
                    off += w;
                }
            } else {
                let mut off = 0;
                for &p in parts {
                    let pv = nodes.value(p);
                    let n = pv.len();
                    if nodes.requires(p) {
                        res.push((
                            p,
                            Tensor::from_parts(pv.shape().to_vec(), g.data()[off..off + n].to_vec()),
                        ));
                    }
                    off += n;
                }
            }
            res
        }
        Op::Slice { a, cols, start } => {
            let av = nodes.value(*a);
            let mut ga = vec![0.0; av.len()];
            if *cols {
                let c = av.cols();
                let (r, w) = g.rows_cols();
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
            } else {
                let c = av.cols();
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
            }
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), ga))]
        }
        Op::Transpose(a) => vec![(*a, g.transpose2())],
        Op::Reshape(a) => {
            let av = nodes.value(*a);
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), g.data().to_vec()))]
        }
        Op::GatherRows { a, idx } => {
            let av = nodes.value(*a);
            let c = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (k, &i) in idx.iter().enumerate() {
                for (o, x) in ga[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                    *o += x;
                }
            }
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), ga))]
        }
        Op::ScatterRows { a, idx } => {
            let av = nodes.value(*a);
            let c = av.cols();
            let mut ga = Vec::with_capacity(av.len());
            for &i in idx {
                ga.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
            }
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), ga))]
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = nodes.value(*gain);
            let (r, c) = xhat.rows_cols();
            let mut ga = vec![0.0; r * c];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for i in 0..r {
                let gy = g.row(i);
                let xh = xhat.row(i);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..c {
                    gg[j] += gy[j] * xh[j];
                    gb[j] += gy[j];
                    let d = gy[j] * gv.data()[j];
                    m1 += d;
                    m2 += d * xh[j];
                }
                m1 /= c as f64;
                m2 /= c as f64;
                for j in 0..c {
                    let d = gy[j] * gv.data()[j];
                    ga[i * c + j] = inv_std[i] * (d - m1 - xh[j] * m2);
                }
            }
            vec![
                (*a, Tensor::from_parts(nodes.value(*a).shape().to_vec(), ga)),
                (*gain, Tensor::from_parts(gv.shape().to_vec(), gg)),
                (*bias, Tensor::from_parts(nodes.value(*bias).shape().to_vec(), gb)),
            ]
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let (r, c) = probs.rows_cols();
            let total: f64 = weights.iter().sum();
            let mut ga = vec![0.0; r * c];
            if total > 0.0 {
                let s = g.item() / total;
                for i in 0..r {
                    let w = weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        ga[i * c + j] = s * w * probs.at2(i, j);
                    }
                    ga[i * c + targets[i]] -= s * w;
                }
            }
            let shape = nodes.value(*logits).shape().to_vec();
            vec![(*logits, Tensor::from_parts(shape, ga))]
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<Rc<Tensor>> = inputs.iter().map(|&i| nodes.rc(i)).collect();
            op.backward(g, &vals, out)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &i)| gi.map(|t| (i, t)))
                .collect()
        }
    }
}
