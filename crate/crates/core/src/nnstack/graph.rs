//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in creation order, so the tape is already a topological
//! order and the backward pass is a single reverse sweep. Gradients
//! accumulate across uses of a node and across calls to [`Graph::backward`]
//! until [`Graph::zero_grad`] is called.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, MatRef, Matrix};

use super::layers::SeqMask;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    Gru(Box<GruTape>),
    TConv {
        x: Var,
        kernel: Var,
        bias: Var,
        mask: SeqMask,
    },
    MaskedMean {
        x: Var,
        mask: SeqMask,
    },
    Ccc {
        scores: Var,
        labels: Matrix,
        weights: [f64; 3],
    },
    CrossEntropy {
        logits: Var,
        classes: Vec<usize>,
    },
    Distill {
        student: Var,
        teacher: Matrix,
        gamma: Vec<f64>,
        eps: f64,
    },
}

/// Activations kept by the fused GRU sequence op for backpropagation through time.
#[derive(Debug)]
pub(crate) struct GruTape {
    x: Var,
    w: Var,
    u: Var,
    b: Var,
    mask: SeqMask,
    hidden: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Matrix>,
    grads: Vec<Option<Matrix>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Differentiable input (parameter or input under test).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0].as_slice()[0]
    }

    /// Accumulated gradient, `None` if nothing has flowed into `v` yet.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or an all-zero matrix of the node's shape.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.values[v.0].shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.values[a.0].map(|x| alpha * x);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, alpha), ng)
    }

    /// `a + 1 * row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (&self.values[a.0], &self.values[row.0]);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", va.shape(), vr.shape())));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(libm::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.values[a.0].sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.rows() != vb.rows() {
            return Err(Error::shape("concat_cols", format!("{:?} | {:?}", va.shape(), vb.shape())));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut out = Matrix::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(va.row(r));
            row[ca..].copy_from_slice(vb.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Fused GRU over a time-major padded batch.
    ///
    /// `x` is `(T*B) x D` with row `t*B + b`; `w` is `D x 3H`, `u` is `H x 3H`
    /// and `b` is `1 x 3H`, gate blocks ordered update, reset, candidate. The
    /// initial state is zero. On frames the mask marks invalid the state is
    /// carried through unchanged.
    pub fn gru_sequence(&mut self, x: Var, w: Var, u: Var, b: Var, mask: &SeqMask) -> Result<Var> {
        let (t_max, batch) = (mask.t_max(), mask.batch());
        let (vx, vw, vu, vb) = (&self.values[x.0], &self.values[w.0], &self.values[u.0], &self.values[b.0]);
        let hidden = vu.rows();
        let g3 = 3 * hidden;
        if vx.rows() != t_max * batch {
            return Err(Error::shape("gru_sequence", format!("{} rows for T={t_max}, B={batch}", vx.rows())));
        }
        if vw.rows() != vx.cols() || vw.cols() != g3 || vu.cols() != g3 || vb.shape() != (1, g3) {
            return Err(Error::shape(
                "gru_sequence",
                format!("x {:?}, w {:?}, u {:?}, b {:?}", vx.shape(), vw.shape(), vu.shape(), vb.shape()),
            ));
        }
        let rows = t_max * batch;
        // input projections for all frames at once
        let mut proj = vec![0.0; rows * g3];
        gemm(
            MatRef::new(vx.as_slice(), rows, vx.cols()),
            MatRef::new(vw.as_slice(), vw.rows(), g3),
            &mut proj,
            false,
        );
        for row in proj.chunks_exact_mut(g3) {
            for (p, bias) in row.iter_mut().zip(vb.as_slice()) {
                *p += bias;
            }
        }
        let us = vu.as_slice();
        let mut out = vec![0.0; rows * hidden];
        let mut z = vec![0.0; rows * hidden];
        let mut r = vec![0.0; rows * hidden];
        let mut c = vec![0.0; rows * hidden];
        let zero_h = vec![0.0; batch * hidden];
        let mut rec = vec![0.0; batch * 2 * hidden];
        let mut rh = vec![0.0; batch * hidden];
        let mut cand = vec![0.0; batch * hidden];
        for t in 0..t_max {
            let (done, rest) = out.split_at_mut(t * batch * hidden);
            let h_prev: &[f64] = if t == 0 { &zero_h } else { &done[(t - 1) * batch * hidden..] };
            let h_out = &mut rest[..batch * hidden];
            gemm(
                MatRef::new(h_prev, batch, hidden),
                MatRef::columns(us, hidden, g3, 0, 2 * hidden),
                &mut rec,
                false,
            );
            let base = t * batch;
            for bi in 0..batch {
                let p = &proj[(base + bi) * g3..(base + bi + 1) * g3];
                let rc = &rec[bi * 2 * hidden..(bi + 1) * 2 * hidden];
                let o = (base + bi) * hidden;
                for j in 0..hidden {
                    let zj = sigmoid(p[j] + rc[j]);
                    let rj = sigmoid(p[hidden + j] + rc[hidden + j]);
                    z[o + j] = zj;
                    r[o + j] = rj;
                    rh[bi * hidden + j] = rj * h_prev[bi * hidden + j];
                }
            }
            gemm(
                MatRef::new(&rh, batch, hidden),
                MatRef::columns(us, hidden, g3, 2 * hidden, hidden),
                &mut cand,
                false,
            );
            for bi in 0..batch {
                let o = (base + bi) * hidden;
                let hp = &h_prev[bi * hidden..(bi + 1) * hidden];
                let ho = &mut h_out[bi * hidden..(bi + 1) * hidden];
                if !mask.is_valid(t, bi) {
                    ho.copy_from_slice(hp);
                    continue;
                }
                let p = &proj[(base + bi) * g3 + 2 * hidden..(base + bi + 1) * g3];
                for j in 0..hidden {
                    let cj = libm::tanh(p[j] + cand[bi * hidden + j]);
                    c[o + j] = cj;
                    let zj = z[o + j];
                    ho[j] = (1.0 - zj) * hp[j] + zj * cj;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(u) || self.ng(b);
        let tape = GruTape {
            x,
            w,
            u,
            b,
            mask: mask.clone(),
            hidden,
            z,
            r,
            c,
        };
        Ok(self.push(Matrix::from_vec(rows, hidden, out)?, Op::Gru(Box::new(tape)), ng))
    }

    /// Depthwise temporal convolution, kernel width 3, zero same-padding.
    ///
    /// `kernel` is `D x 3` with taps for frames `t-1, t, t+1`; `bias` is `1 x D`.
    /// Frames the mask marks invalid read as zero.
    pub fn tconv(&mut self, x: Var, kernel: Var, bias: Var, mask: &SeqMask) -> Result<Var> {
        let (t_max, batch) = (mask.t_max(), mask.batch());
        let (vx, vk, vb) = (&self.values[x.0], &self.values[kernel.0], &self.values[bias.0]);
        let d = vx.cols();
        if vx.rows() != t_max * batch {
            return Err(Error::shape("tconv", format!("{} rows for T={t_max}, B={batch}", vx.rows())));
        }
        if vk.shape() != (d, 3) || vb.shape() != (1, d) {
            return Err(Error::shape(
                "tconv",
                format!("{d} channels, kernel {:?}, bias {:?}", vk.shape(), vb.shape()),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), d);
        let ks = vk.as_slice();
        for t in 0..t_max {
            for bi in 0..batch {
                let o = out.row_mut(t * batch + bi);
                o.copy_from_slice(vb.as_slice());
                for tap in 0..3 {
                    let src = t as isize + tap as isize - 1;
                    if src < 0 || src as usize >= t_max || !mask.is_valid(src as usize, bi) {
                        continue;
                    }
                    let xr = vx.row(src as usize * batch + bi);
                    for ch in 0..d {
                        o[ch] += ks[ch * 3 + tap] * xr[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(
            out,
            Op::TConv {
                x,
                kernel,
                bias,
                mask: mask.clone(),
            },
            ng,
        ))
    }

    /// Mean over valid frames of a time-major `(T*B) x H` sequence, giving `B x H`.
    pub fn masked_mean(&mut self, x: Var, mask: &SeqMask) -> Result<Var> {
        let (t_max, batch) = (mask.t_max(), mask.batch());
        let vx = &self.values[x.0];
        if vx.rows() != t_max * batch {
            return Err(Error::shape("masked_mean", format!("{} rows for T={t_max}, B={batch}", vx.rows())));
        }
        let h = vx.cols();
        let mut out = Matrix::zeros(batch, h);
        for bi in 0..batch {
            let len = mask.length(bi);
            if len == 0 {
                return Err(Error::Input(format!("sequence {bi} in batch has no valid frames")));
            }
            let o = out.row_mut(bi);
            for t in 0..len {
                for (acc, v) in o.iter_mut().zip(vx.row(t * batch + bi)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / len as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedMean { x, mask: mask.clone() }, ng))
    }

    pub(crate) fn push_loss(&mut self, value: f64, op: Op, needs_grad: bool) -> Var {
        self.push(Matrix::scalar(value), op, needs_grad)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Reverse sweep from a scalar root; gradients accumulate into leaves.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.values[root.0].shape()),
            ));
        }
        // Intermediate gradients from a previous sweep are not reused: only
        // leaves accumulate across calls.
        let mut local: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Constant => {}
                op => self.backprop_op(i, op, &g, &mut local)?,
            }
        }
        Ok(())
    }

    fn backprop_op(&self, node: usize, op: &Op, g: &Matrix, local: &mut [Option<Matrix>]) -> Result<()> {
        let vals = &self.values;
        let ng = &self.needs_grad;
        let mut acc = |v: Var, m: Matrix| {
            if !ng[v.0] {
                return;
            }
            match &mut local[v.0] {
                Some(a) => a.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                acc(*a, zip(g, vb, |gi, y| gi * y));
                acc(*b, zip(g, va, |gi, x| gi * x));
            }
            Op::Scale(a, alpha) => acc(*a, g.map(|x| alpha * x)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*row, gr);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                if ng[a.0] {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(
                        MatRef::new(g.as_slice(), g.rows(), g.cols()),
                        MatRef::new(vb.as_slice(), vb.rows(), vb.cols()).t(),
                        ga.as_mut_slice(),
                        false,
                    );
                    acc(*a, ga);
                }
                if ng[b.0] {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(
                        MatRef::new(va.as_slice(), va.rows(), va.cols()).t(),
                        MatRef::new(g.as_slice(), g.rows(), g.cols()),
                        gb.as_mut_slice(),
                        false,
                    );
                    acc(*b, gb);
                }
            }
            Op::Sigmoid(a) => {
                // recompute from the input; the output is not indexed by op
                let va = &vals[a.0];
                acc(
                    *a,
                    zip(g, va, |gi, x| {
                        let s = sigmoid(x);
                        gi * s * (1.0 - s)
                    }),
                );
            }
            Op::Tanh(a) => {
                let va = &vals[a.0];
                acc(
                    *a,
                    zip(g, va, |gi, x| {
                        let t = libm::tanh(x);
                        gi * (1.0 - t * t)
                    }),
                );
            }
            Op::Sum(a) => {
                let (r, c) = vals[a.0].shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::ConcatCols(a, b) => {
                let ca = vals[a.0].cols();
                let cb = vals[b.0].cols();
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Gru(tape) => self.backprop_gru(node, tape, g, &mut acc),
            Op::TConv { x, kernel, bias, mask } => {
                let (vx, vk) = (&vals[x.0], &vals[kernel.0]);
                let d = vx.cols();
                let (t_max, batch) = (mask.t_max(), mask.batch());
                let mut gx = Matrix::zeros(vx.rows(), d);
                let mut gk = Matrix::zeros(d, 3);
                let mut gb = Matrix::zeros(1, d);
                let ks = vk.as_slice();
                for t in 0..t_max {
                    for bi in 0..batch {
                        let gy = g.row(t * batch + bi);
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(gy) {
                            *o += v;
                        }
                        for tap in 0..3 {
                            let src = t as isize + tap as isize - 1;
                            if src < 0 || src as usize >= t_max || !mask.is_valid(src as usize, bi) {
                                continue;
                            }
                            let row = src as usize * batch + bi;
                            let xr = vx.row(row);
                            let gks = gk.as_mut_slice();
                            for ch in 0..d {
                                gks[ch * 3 + tap] += xr[ch] * gy[ch];
                            }
                            let gxr = gx.row_mut(row);
                            for ch in 0..d {
                                gxr[ch] += ks[ch * 3 + tap] * gy[ch];
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*kernel, gk);
                acc(*bias, gb);
            }
            Op::MaskedMean { x, mask } => {
                let vx = &vals[x.0];
                let batch = mask.batch();
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for bi in 0..batch {
                    let len = mask.length(bi);
                    let inv = 1.0 / len as f64;
                    for t in 0..len {
                        for (o, v) in gx.row_mut(t * batch + bi).iter_mut().zip(g.row(bi)) {
                            *o = v * inv;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Ccc { scores, labels, weights } => {
                let gs = crate::losses::ccc_loss_grad(&vals[scores.0], labels, weights);
                acc(*scores, gs.map(|v| v * g.as_slice()[0]));
            }
            Op::CrossEntropy { logits, classes } => {
                let gl = crate::losses::cross_entropy_grad(&vals[logits.0], classes);
                acc(*logits, gl.map(|v| v * g.as_slice()[0]));
            }
            Op::Distill {
                student,
                teacher,
                gamma,
                eps,
            } => {
                let gs = crate::losses::distillation_grad(teacher, &vals[student.0], gamma, *eps);
                acc(*student, gs.map(|v| v * g.as_slice()[0]));
            }
        }
        Ok(())
    }

    fn backprop_gru(&self, node: usize, tape: &GruTape, g: &Matrix, acc: &mut impl FnMut(Var, Matrix)) {
        let vals = &self.values;
        let GruTape {
            x,
            w,
            u,
            b,
            mask,
            hidden,
            z,
            r,
            c,
        } = tape;
        let h = *hidden;
        let g3 = 3 * h;
        let (t_max, batch) = (mask.t_max(), mask.batch());
        let rows = t_max * batch;
        let vx = &vals[x.0];
        let vw = &vals[w.0];
        let us = vals[u.0].as_slice();
        let hs = vals[node].as_slice();
        let mut d_proj = vec![0.0; rows * g3];
        let mut gu = Matrix::zeros(h, g3);
        let mut dh_next = vec![0.0; batch * h];
        let mut dh = vec![0.0; batch * h];
        let mut dh_prev = vec![0.0; batch * h];
        let mut d_rh = vec![0.0; batch * h];
        let mut rh = vec![0.0; batch * h];
        let zero_h = vec![0.0; batch * h];
        for t in (0..t_max).rev() {
            let h_prev: &[f64] = if t == 0 { &zero_h } else { &hs[(t - 1) * batch * h..t * batch * h] };
            let base = t * batch;
            for i in 0..batch * h {
                dh[i] = g.as_slice()[base * h + i] + dh_next[i];
            }
            let dp_t = &mut d_proj[base * g3..(base + batch) * g3];
            for bi in 0..batch {
                let o = (base + bi) * h;
                let dhb = &dh[bi * h..(bi + 1) * h];
                let hp = &h_prev[bi * h..(bi + 1) * h];
                let dpb = &mut dp_t[bi * g3..(bi + 1) * g3];
                let dhp = &mut dh_prev[bi * h..(bi + 1) * h];
                if !mask.is_valid(t, bi) {
                    dhp.copy_from_slice(dhb);
                    continue;
                }
                for j in 0..h {
                    let (zj, cj) = (z[o + j], c[o + j]);
                    let dc = dhb[j] * zj;
                    let dz = dhb[j] * (cj - hp[j]);
                    dhp[j] = dhb[j] * (1.0 - zj);
                    dpb[2 * h + j] = dc * (1.0 - cj * cj);
                    dpb[j] = dz * zj * (1.0 - zj);
                }
            }
            // d(r*h_prev) = d_cand_pre * U_h^T
            gemm(
                MatRef::columns(dp_t, batch, g3, 2 * h, h),
                MatRef::columns(us, h, g3, 2 * h, h).t(),
                &mut d_rh,
                false,
            );
            for bi in 0..batch {
                let o = (base + bi) * h;
                let valid = mask.is_valid(t, bi);
                for j in 0..h {
                    let k = bi * h + j;
                    let rj = r[o + j];
                    rh[k] = if valid { rj * h_prev[k] } else { 0.0 };
                    if !valid {
                        continue;
                    }
                    let dr = d_rh[k] * h_prev[k];
                    dh_prev[k] += d_rh[k] * rj;
                    dp_t[bi * g3 + h + j] = dr * rj * (1.0 - rj);
                }
            }
            // recurrent contributions of update and reset gates
            gemm(
                MatRef::columns(dp_t, batch, g3, 0, 2 * h),
                MatRef::columns(us, h, g3, 0, 2 * h).t(),
                &mut dh_prev,
                true,
            );
            gemm_strided(
                MatRef::new(h_prev, batch, h).t(),
                MatRef::columns(dp_t, batch, g3, 0, 2 * h),
                gu.as_mut_slice(),
                g3,
                true,
            );
            gemm_strided(
                MatRef::new(&rh, batch, h).t(),
                MatRef::columns(dp_t, batch, g3, 2 * h, h),
                &mut gu.as_mut_slice()[2 * h..],
                g3,
                true,
            );
            core::mem::swap(&mut dh_next, &mut dh_prev);
        }
        acc(*u, gu);
        let mut gb = Matrix::zeros(1, g3);
        for row in d_proj.chunks_exact(g3) {
            for (o, v) in gb.as_mut_slice().iter_mut().zip(row) {
                *o += v;
            }
        }
        acc(*b, gb);
        if self.needs_grad[w.0] {
            let mut gw = Matrix::zeros(vw.rows(), g3);
            gemm(
                MatRef::new(vx.as_slice(), rows, vx.cols()).t(),
                MatRef::new(&d_proj, rows, g3),
                gw.as_mut_slice(),
                false,
            );
            acc(*w, gw);
        }
        if self.needs_grad[x.0] {
            let mut gx = Matrix::zeros(rows, vx.cols());
            gemm(
                MatRef::new(&d_proj, rows, g3),
                MatRef::new(vw.as_slice(), vw.rows(), g3).t(),
                gx.as_mut_slice(),
                false,
            );
            acc(*x, gx);
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
