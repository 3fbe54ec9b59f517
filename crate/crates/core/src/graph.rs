//! Reverse-mode differentiation over an eagerly evaluated operation record.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation computes its value immediately and appends a node; node
//! indices are therefore a topological order. [`Graph::backward`] walks the
//! record in reverse from a scalar root and returns the [`Gradients`] of
//! every parameter reached.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ctc;
use crate::encoder::PadMask;
use crate::tensor::gemm;
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Exp,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: PadMask,
        probs: Vec<f64>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Ctc {
        log_probs: Var,
        row_start: usize,
        frames: usize,
        occupancy: Vec<f64>,
    },
}

struct Node {
    op: Op,
    // `None` for parameters, whose values live in the store.
    value: Option<Tensor>,
}

/// Outcome flag of a CTC node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcStatus {
    Feasible,
    /// Too few frames for the target; the loss is `+inf` and contributes no
    /// gradient.
    Infeasible,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Node for a stored parameter. Repeated calls return the same node, so
    /// shared parameters accumulate a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            (ta.data(), k as isize, 1),
            (tb.data(), n as isize, 1),
            0.0,
            (&mut out, n as isize, 1),
        );
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    /// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(mismatch("linear", tx, tw));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.shape() != [n] {
            return Err(mismatch("linear", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(
            m,
            k,
            n,
            1.0,
            (tx.data(), k as isize, 1),
            (tw.data(), n as isize, 1),
            1.0,
            (&mut out, n as isize, 1),
        );
        Ok(self.push(
            Op::Linear { x, weight, bias },
            Tensor::from_parts(vec![m, n], out),
        ))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Gelu, None) => Ok(self.gelu(a)),
            (Elementwise::Exp, None) => Ok(self.exp(a)),
            (Elementwise::Scale(c), None) => Ok(self.scale(a, c)),
            (kind, _) => Err(Error::Contract(format!(
                "wrong operand count for elementwise {kind:?}"
            ))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(op, out))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * std_normal_cdf(x), Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    /// Adds a `[C]` vector to every row of an `[R, C]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.cols()] {
            return Err(mismatch("add_row", tx, tb));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, b) in row.iter_mut().zip(tb.data()) {
                *r += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(Op::AddRow { x, bias }, out))
    }

    /// Normalizes each row of `x: [R, D]` to zero mean and unit (biased)
    /// variance, then applies `gamma`, `beta: [D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tx.shape().len() != 2 || d < 2 {
            return Err(Error::InvalidShape(format!(
                "layer_norm needs [R, D>=2], got {:?}",
                tx.shape()
            )));
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = ctc::log_softmax_rows(self.value(x));
        self.push(Op::LogSoftmax(x), out)
    }

    /// Multi-head scaled dot-product attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `[B·P, D]` with utterance `b` occupying rows
    /// `b·P..(b+1)·P`, where `P = mask.padded_len()`. Keys at or beyond an
    /// utterance's valid length get zero weight. Heads split `D` into
    /// contiguous blocks of `D / heads` columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &PadMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(mismatch("attention", tq, tk));
        }
        let d = tq.cols();
        let p = mask.padded_len();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if tq.rows() != mask.batch_size() * p {
            return Err(Error::InvalidShape(format!(
                "attention input has {} rows, mask describes {}x{p}",
                tq.rows(),
                mask.batch_size()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; mask.batch_size() * heads * p * p];
        let mut out = vec![0.0; tq.len()];
        for (b, &valid) in mask.lengths().iter().enumerate() {
            let base = b * p * d;
            for h in 0..heads {
                let off = base + h * dh;
                let pr = &mut probs[(b * heads + h) * p * p..][..p * p];
                // scores = scale · Q Kᵀ
                gemm(
                    p,
                    dh,
                    p,
                    scale,
                    (&tq.data()[off..], d as isize, 1),
                    (&tk.data()[off..], 1, d as isize),
                    0.0,
                    (pr, p as isize, 1),
                );
                for row in pr.chunks_mut(p) {
                    let m = row[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row[..valid].iter_mut() {
                        *x = libm::exp(*x - m);
                        z += *x;
                    }
                    row[..valid].iter_mut().for_each(|x| *x /= z);
                    row[valid..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm(
                    p,
                    p,
                    dh,
                    1.0,
                    (pr, p as isize, 1),
                    (&tv.data()[off..], d as isize, 1),
                    0.0,
                    (&mut out[off..], d as isize, 1),
                );
            }
        }
        let out = Tensor::from_parts(tq.shape().to_vec(), out);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask: mask.clone(),
                probs,
            },
            out,
        ))
    }

    /// Attention weights recorded by an attention node, `[B, H, P, P]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::InvalidShape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    t.shape()
                )));
            }
            total += w * t.item();
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(total)))
    }

    /// CTC loss of `labels` against rows `row_start..row_start + frames` of a
    /// log-posterior matrix.
    pub fn ctc_loss(
        &mut self,
        log_probs: Var,
        row_start: usize,
        frames: usize,
        labels: &ctc::LabelSequence,
    ) -> Result<(Var, CtcStatus)> {
        let t = self.value(log_probs);
        let c = t.cols();
        if t.shape().len() != 2 || frames == 0 || row_start + frames > t.rows() {
            return Err(Error::InvalidShape(format!(
                "ctc rows {row_start}..{} outside {:?}",
                row_start + frames,
                t.shape()
            )));
        }
        if labels.ids().iter().any(|&l| l >= c) {
            return Err(Error::Contract(format!("label id outside {c} classes")));
        }
        let slice = &t.data()[row_start * c..(row_start + frames) * c];
        let out = ctc::forward_backward(slice, frames, c, labels.ids());
        let status = if out.feasible {
            CtcStatus::Feasible
        } else {
            CtcStatus::Infeasible
        };
        let v = self.push(
            Op::Ctc {
                log_probs,
                row_start,
                frames,
                occupancy: out.occupancy,
            },
            Tensor::scalar(out.loss),
        );
        Ok((v, status))
    }

    /// Gradients of the scalar `root` with respect to every parameter that
    /// reaches it. Branches that depend on no parameter are not visited.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Input => false,
                Op::Param(_) => true,
                op => op.inputs().iter().any(|v| needs[v.0]),
            };
        }
        let mut state = Backward {
            grads: Vec::with_capacity(n),
            needs,
        };
        state.grads.resize_with(n, || None);
        state.grads[root.0] = Some(Tensor::scalar(1.0));

        let mut params = Vec::with_capacity(self.params.len());
        params.resize_with(self.params.len(), || None);
        for i in (0..n).rev() {
            let Some(gy) = state.grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Param(id) => params[id.0] = Some(gy),
                _ => self.backward_node(i, &gy, &mut state),
            }
        }
        Ok(Gradients { params })
    }

    fn backward_node(&self, i: usize, gy: &Tensor, st: &mut Backward) {
        let y = &self.nodes[i];
        match &y.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.matmul_backward(*a, *b, (m, k, n), gy, st);
            }
            Op::Linear { x, weight, bias } => {
                let (tx, tw) = (self.value(*x), self.value(*weight));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                self.matmul_backward(*x, *weight, (m, k, n), gy, st);
                if let Some(gb) = st.acc(self, *bias) {
                    for row in gy.data().chunks(n) {
                        for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = st.acc(self, *a) {
                    ga.add_assign(gy);
                }
                if let Some(gb) = st.acc(self, *b) {
                    gb.add_assign(gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = st.acc(self, *a) {
                    ga.add_assign(gy);
                }
                if let Some(gb) = st.acc(self, *b) {
                    gb.add_scaled(gy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = st.acc(self, *a) {
                    for ((g, &d), &bv) in ga.data_mut().iter_mut().zip(gy.data()).zip(tb.data()) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = st.acc(self, *b) {
                    for ((g, &d), &av) in gb.data_mut().iter_mut().zip(gy.data()).zip(ta.data()) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = st.acc(self, *a) {
                    ga.add_scaled(gy, *c);
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = st.acc(self, *x) {
                    gx.add_assign(gy);
                }
                if let Some(gb) = st.acc(self, *bias) {
                    let c = gb.len();
                    for row in gy.data().chunks(c) {
                        for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = st.acc(self, *a) {
                    for ((g, &d), &x) in ga.data_mut().iter_mut().zip(gy.data()).zip(ta.data()) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = st.acc(self, *a) {
                    for ((g, &d), &x) in ga.data_mut().iter_mut().zip(gy.data()).zip(ta.data()) {
                        *g += d * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                }
            }
            Op::Exp(a) => {
                let out = y.value.as_ref().expect("exp value");
                if let Some(ga) = st.acc(self, *a) {
                    for ((g, &d), &e) in ga.data_mut().iter_mut().zip(gy.data()).zip(out.data()) {
                        *g += d * e;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                if let Some(gg) = st.acc(self, *gamma) {
                    for (row_g, row_h) in gy.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((g, &dy), &h) in gg.data_mut().iter_mut().zip(row_g).zip(row_h) {
                            *g += dy * h;
                        }
                    }
                }
                if let Some(gb) = st.acc(self, *beta) {
                    for row_g in gy.data().chunks(d) {
                        for (g, &dy) in gb.data_mut().iter_mut().zip(row_g) {
                            *g += dy;
                        }
                    }
                }
                let Some(gx) = st.acc(self, *x) else { return };
                let inv_d = 1.0 / d as f64;
                let mut dxhat = vec![0.0; d];
                for (r, (row_g, row_h)) in gy.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dxhat[j] = row_g[j] * tg.data()[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * row_h[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dxhat[j] - mean_dh - row_h[j] * mean_dh_h);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let out = y.value.as_ref().expect("log_softmax value");
                let c = out.cols();
                let Some(ga) = st.acc(self, *a) else { return };
                for ((g_row, d_row), y_row) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(gy.data().chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let total: f64 = d_row.iter().sum();
                    for ((g, &d), &l) in g_row.iter_mut().zip(d_row).zip(y_row) {
                        *g += d - libm::exp(l) * total;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask, probs, gy, st),
            Op::Sum(a) => {
                let d = gy.item();
                if let Some(ga) = st.acc(self, *a) {
                    ga.data_mut().iter_mut().for_each(|g| *g += d);
                }
            }
            Op::WeightedSum(terms) => {
                let d = gy.item();
                for &(v, w) in terms {
                    if let Some(gv) = st.acc(self, v) {
                        gv.data_mut()[0] += w * d;
                    }
                }
            }
            Op::Ctc {
                log_probs,
                row_start,
                frames,
                occupancy,
            } => {
                let d = gy.item();
                let Some(gl) = st.acc(self, *log_probs) else { return };
                let c = gl.cols();
                let rows = &mut gl.data_mut()[row_start * c..(row_start + frames) * c];
                for (g, &o) in rows.iter_mut().zip(occupancy) {
                    *g -= d * o;
                }
            }
        }
    }

    /// `dA += dY · Bᵀ` and `dB += Aᵀ · dY` for `Y = A · B`.
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        (m, k, n): (usize, usize, usize),
        gy: &Tensor,
        st: &mut Backward,
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        if let Some(ga) = st.acc(self, a) {
            gemm(
                m,
                n,
                k,
                1.0,
                (gy.data(), n as isize, 1),
                (tb.data(), 1, n as isize),
                1.0,
                (ga.data_mut(), k as isize, 1),
            );
        }
        if let Some(gb) = st.acc(self, b) {
            gemm(
                k,
                m,
                n,
                1.0,
                (ta.data(), 1, k as isize),
                (gy.data(), n as isize, 1),
                1.0,
                (gb.data_mut(), n as isize, 1),
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &PadMask,
        probs: &[f64],
        gy: &Tensor,
        st: &mut Backward,
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let p = mask.padded_len();
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tq.len()];
        let mut dv = vec![0.0; tq.len()];
        let mut dp = vec![0.0; p * p];
        for b in 0..mask.batch_size() {
            let base = b * p * d;
            for h in 0..heads {
                let off = base + h * dh;
                let pr = &probs[(b * heads + h) * p * p..][..p * p];
                // dP = dY · Vᵀ
                gemm(
                    p,
                    dh,
                    p,
                    1.0,
                    (&gy.data()[off..], d as isize, 1),
                    (&tv.data()[off..], 1, d as isize),
                    0.0,
                    (&mut dp, p as isize, 1),
                );
                // dV = Pᵀ · dY
                gemm(
                    p,
                    p,
                    dh,
                    1.0,
                    (pr, 1, p as isize),
                    (&gy.data()[off..], d as isize, 1),
                    0.0,
                    (&mut dv[off..], d as isize, 1),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), in place in dp
                for (dp_row, p_row) in dp.chunks_mut(p).zip(pr.chunks(p)) {
                    let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                        *x = pv * (*x - dot);
                    }
                }
                // dQ = scale · dS · K
                gemm(
                    p,
                    p,
                    dh,
                    scale,
                    (&dp, p as isize, 1),
                    (&tk.data()[off..], d as isize, 1),
                    0.0,
                    (&mut dq[off..], d as isize, 1),
                );
                // dK = scale · dSᵀ · Q
                gemm(
                    p,
                    p,
                    dh,
                    scale,
                    (&dp, 1, p as isize),
                    (&tq.data()[off..], d as isize, 1),
                    0.0,
                    (&mut dk[off..], d as isize, 1),
                );
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(g) = st.acc(self, var) {
                g.add_assign(&Tensor::from_parts(tq.shape().to_vec(), grad));
            }
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Scale(a, _) | Op::Relu(a) | Op::Gelu(a) | Op::Exp(a) | Op::LogSoftmax(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::WeightedSum(terms) => terms.iter().map(|&(v, _)| v).collect(),
            Op::Ctc { log_probs, .. } => vec![*log_probs],
        }
    }
}

/// Pending gradients of a backward pass.
struct Backward {
    grads: Vec<Option<Tensor>>,
    /// Whether a node depends on any parameter.
    needs: Vec<bool>,
}

impl Backward {
    /// Gradient accumulator of `v`, created on first use; `None` if `v`
    /// depends on no parameter.
    fn acc(&mut self, g: &Graph<'_>, v: Var) -> Option<&mut Tensor> {
        if !self.needs[v.0] {
            return None;
        }
        Some(self.grads[v.0].get_or_insert_with(|| g.value(v).zeros_like()))
    }
}

/// Parameter gradients from [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` if the parameter does not reach the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: Tensor) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", value).unwrap();
        (store, id)
    }

    #[test]
    fn matmul_hand_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let m = Tensor::from_vec(&[2, 2], vec![0.3, -1.7, 2.5, 1e-3]).unwrap();
        let i = g.input(Tensor::eye(2).unwrap());
        let mv = g.input(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);

        let bad = g.input(Tensor::zeros(&[3, 1]).unwrap());
        assert!(matches!(g.matmul(a, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn linear_hand_example() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = store.add("b", Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 2.0]).unwrap());
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.linear(x, wv, bv).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.0, 5.5, 5.0]);
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        // dW = xᵀ·1, db = column sums of 1
        assert_eq!(grads.param(w).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(grads.param(b).unwrap().data(), &[2.0, 2.0]);
        let short = g.input(Tensor::zeros(&[3]).unwrap());
        assert!(g.linear(x, wv, short).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let z = g.input(Tensor::zeros(&[3]).unwrap());
        let s = g.elementwise(Elementwise::Add, x, Some(z)).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let r = g.elementwise(Elementwise::Relu, x, None).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let other = g.input(Tensor::zeros(&[2]).unwrap());
        assert!(g.add(x, other).is_err());
        assert!(g.elementwise(Elementwise::Relu, x, Some(z)).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let gamma = g.input(Tensor::new(&[2], crate::Init::Constant(1.0)).unwrap());
        let beta = g.input(Tensor::zeros(&[2]).unwrap());
        let x = g.input(Tensor::from_vec(&[2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = g.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - 1.0).abs() < 1e-9 && (out[3] + 1.0).abs() < 1e-9);
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[3]).unwrap());
        let y = g.log_softmax(x);
        for &v in g.value(y).data() {
            assert!((v + libm::log(3.0)).abs() < 1e-15);
        }
        let x = g.input(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x);
        let out = g.value(y).data();
        assert!(out[0].abs() < 1e-12 && (out[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let p = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (mut store, id) = store_with(p.clone());
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(id);
            let root = g.sum(v);
            g.backward(root).unwrap()
        };
        assert_eq!(grads.param(id).unwrap().data(), &[1.0; 4]);

        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(id);
            let sq = g.mul(v, v).unwrap();
            let root = g.sum(sq);
            g.backward(root).unwrap()
        };
        let expected: Vec<f64> = p.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(grads.param(id).unwrap().data(), expected.as_slice());

        store.accumulate(&grads, 1.0);
        let once = store.get(id).grad.clone();
        store.accumulate(&grads, 1.0);
        let twice: Vec<f64> = once.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(store.get(id).grad.data(), twice.as_slice());
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }
}
