//! Differentiable tensor operations.
//!
//! Every operation computes eagerly and, when an operand is tape-attached,
//! records a backward closure that scatters the output gradient into its
//! parents. Shape mixing is deliberately strict: elementwise ops require
//! identical shapes, and the only broadcasts are scalar constants,
//! [`Tensor::add_row`] (a vector over rows) and [`Tensor::scale_rows`]
//! (a per-row scalar), so shape bugs surface at the call site.

use super::{GradStore, NodeRef, Tape, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

fn resolve_tape(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = t.node() {
            match found {
                None => found = Some(&n.tape),
                Some(f) if f.same_tape(&n.tape) => {}
                Some(_) => {
                    return Err(Error::contract(op, "operands recorded on different tapes"))
                }
            }
        }
    }
    Ok(found.cloned())
}

fn make(
    tape: Option<Tape>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    back: impl Fn(&[f64], &mut GradStore) + Send + 'static,
) -> Tensor {
    match tape {
        None => Tensor::from_arc(shape, data, None),
        Some(tape) => {
            let id = tape.push(data.len(), Some(Box::new(back)));
            Tensor::from_arc(shape, data, Some(NodeRef { tape, id }))
        }
    }
}

impl Tensor {
    pub(crate) fn from_arc(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        node: Option<NodeRef>,
    ) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite values for shape {shape:?}"
        );
        Tensor { shape, data, node }
    }

    fn id(&self) -> Option<usize> {
        self.node().map(|n| n.id)
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    // ---- elementwise helpers ------------------------------------------------

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Result<Tensor> {
        let tape = resolve_tape(op, &[self])?;
        let out: Arc<Vec<f64>> = Arc::new(self.data().iter().map(|&x| f(x)).collect());
        let (x, y, pid) = (self.data_arc(), Arc::clone(&out), self.id());
        Ok(make(tape, self.shape().to_vec(), out, move |g, store| {
            if let Some(id) = pid {
                store.accum(id, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(x[i], y[i]);
                    }
                });
            }
        }))
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + Send + 'static,
        dfb: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let tape = resolve_tape(op, &[self, other])?;
        let out: Arc<Vec<f64>> = Arc::new(
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        );
        let (a, b) = (self.data_arc(), other.data_arc());
        let (pa, pb) = (self.id(), other.id());
        Ok(make(tape, self.shape().to_vec(), out, move |g, store| {
            if let Some(id) = pa {
                store.accum(id, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * dfa(a[i], b[i]);
                    }
                });
            }
            if let Some(id) = pb {
                store.accum(id, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * dfb(a[i], b[i]);
                    }
                });
            }
        }))
    }

    // ---- elementwise ops ----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise max; the gradient follows the left operand on ties.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "maximum",
            f64::max,
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise min; the gradient follows the left operand on ties.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "minimum",
            f64::min,
            |a, b| if a <= b { 1.0 } else { 0.0 },
            |a, b| if a <= b { 0.0 } else { 1.0 },
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Absolute value; derivative at 0 is taken as +1.
    pub fn abs(&self) -> Result<Tensor> {
        self.unary(
            "abs",
            f64::abs,
            |x, _| if x >= 0.0 { 1.0 } else { -1.0 },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log; all entries must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("ln", "non-positive entry"));
        }
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |x| 1.0 / x, |_, y| -y * y)
    }

    /// Elementwise x^p for nonnegative x.
    pub fn powf_scalar(&self, p: f64) -> Result<Tensor> {
        if self.data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("powf_scalar", "negative base"));
        }
        self.unary(
            "powf_scalar",
            move |x| x.powf(p),
            move |x, _| {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// ln(1 + e^x), computed as max(x, 0) + ln1p(e^-|x|) for stability.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(
            "softplus",
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
        )
    }

    // ---- shape ops ----------------------------------------------------------

    /// Zero-copy reshape; the element count must be preserved.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let tape = resolve_tape("reshape", &[self])?;
        let pid = self.id();
        Ok(make(tape, shape, self.data_arc(), move |g, store| {
            if let Some(id) = pid {
                store.accum(id, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i];
                    }
                });
            }
        }))
    }

    /// Matrix transpose (rank 2 only).
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("transpose", "rank-2 tensor required"));
        }
        let (r, c) = (self.rows(), self.cols());
        let tape = resolve_tape("transpose", &[self])?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let pid = self.id();
        Ok(make(
            tape,
            vec![c, r],
            Arc::new(out),
            move |g, store| {
                if let Some(id) = pid {
                    store.accum(id, |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            },
        ))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no tensors given"));
        }
        if axis > 1 || parts.iter().any(|t| t.rank() != 2) {
            return Err(Error::contract("concat", "rank-2 tensors and axis 0|1 required"));
        }
        let tape = resolve_tape("concat", parts)?;
        let (r0, c0) = (parts[0].rows(), parts[0].cols());
        let (mut rows, mut cols) = (r0, c0);
        for t in &parts[1..] {
            if axis == 0 {
                if t.cols() != c0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
            } else {
                if t.rows() != r0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: t.shape().to_vec(),
                    });
                }
                cols += t.cols();
            }
        }
        let mut out = vec![0.0; rows * cols];
        // (parent id, offset along the axis, extent along the axis)
        let mut segments: Vec<(Option<usize>, usize, usize)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for t in parts {
            let extent = if axis == 0 { t.rows() } else { t.cols() };
            let src = t.data();
            if axis == 0 {
                out[offset * cols..(offset + extent) * cols].copy_from_slice(src);
            } else {
                for r in 0..rows {
                    out[r * cols + offset..r * cols + offset + extent]
                        .copy_from_slice(&src[r * extent..(r + 1) * extent]);
                }
            }
            segments.push((t.id(), offset, extent));
            offset += extent;
        }
        Ok(make(
            tape,
            vec![rows, cols],
            Arc::new(out),
            move |g, store| {
                for &(pid, offset, extent) in &segments {
                    let Some(id) = pid else { continue };
                    store.accum(id, |gx| {
                        if axis == 0 {
                            for i in 0..extent * cols {
                                gx[i] += g[offset * cols + i];
                            }
                        } else {
                            for r in 0..rows {
                                for c in 0..extent {
                                    gx[r * extent + c] += g[r * cols + offset + c];
                                }
                            }
                        }
                    });
                }
            },
        ))
    }

    /// Contiguous slice of a rank-2 tensor along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || axis > 1 {
            return Err(Error::contract("narrow", "rank-2 tensor and axis 0|1 required"));
        }
        let (r, c) = (self.rows(), self.cols());
        let extent = if axis == 0 { r } else { c };
        if len == 0 || start + len > extent {
            return Err(Error::contract(
                "narrow",
                format!("range {start}..{} out of extent {extent}", start + len),
            ));
        }
        let tape = resolve_tape("narrow", &[self])?;
        let src = self.data();
        let (out_shape, out): (Vec<usize>, Vec<f64>) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut v = Vec::with_capacity(r * len);
            for i in 0..r {
                v.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            (vec![r, len], v)
        };
        let pid = self.id();
        Ok(make(tape, out_shape, Arc::new(out), move |g, store| {
            if let Some(id) = pid {
                store.accum(id, |gx| {
                    if axis == 0 {
                        for i in 0..len * c {
                            gx[start * c + i] += g[i];
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..len {
                                gx[i * c + start + j] += g[i * len + j];
                            }
                        }
                    }
                });
            }
        }))
    }

    /// Single column of a rank-2 tensor as a rank-1 vector.
    pub fn column(&self, j: usize) -> Result<Tensor> {
        let r = self.rows();
        self.narrow(1, j, 1)?.reshape(vec![r])
    }

    /// Gathers rows of a rank-2 tensor; duplicate indices accumulate gradient.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("select_rows", "rank-2 tensor required"));
        }
        if indices.is_empty() {
            return Err(Error::contract("select_rows", "no indices given"));
        }
        let (r, c) = (self.rows(), self.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::contract(
                "select_rows",
                format!("index {bad} out of {r} rows"),
            ));
        }
        let tape = resolve_tape("select_rows", &[self])?;
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let pid = self.id();
        let idx: Vec<usize> = indices.to_vec();
        Ok(make(
            tape,
            vec![indices.len(), c],
            Arc::new(out),
            move |g, store| {
                if let Some(id) = pid {
                    store.accum(id, |gx| {
                        for (t, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                gx[i * c + j] += g[t * c + j];
                            }
                        }
                    });
                }
            },
        ))
    }

    // ---- broadcasts ----------------------------------------------------------

    /// Adds a length-C vector to every row of an [R, C] tensor.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.rank() != 1 || v.numel() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let tape = resolve_tape("add_row", &[self, v])?;
        let (x, vd) = (self.data(), v.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(x[i * c + j] + vd[j]);
            }
        }
        let (px, pv) = (self.id(), v.id());
        Ok(make(
            tape,
            self.shape().to_vec(),
            Arc::new(out),
            move |g, store| {
                if let Some(id) = px {
                    store.accum(id, |gx| {
                        for i in 0..g.len() {
                            gx[i] += g[i];
                        }
                    });
                }
                if let Some(id) = pv {
                    store.accum(id, |gv| {
                        for i in 0..r {
                            for j in 0..c {
                                gv[j] += g[i * c + j];
                            }
                        }
                    });
                }
            },
        ))
    }

    /// Scales row r of an [R, C] tensor by v[r].
    pub fn scale_rows(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.rank() != 1 || v.numel() != self.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let tape = resolve_tape("scale_rows", &[self, v])?;
        let xd = self.data();
        let vd = v.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] * vd[i]);
            }
        }
        let (x, vv) = (self.data_arc(), v.data_arc());
        let (px, pv) = (self.id(), v.id());
        Ok(make(
            tape,
            self.shape().to_vec(),
            Arc::new(out),
            move |g, store| {
                if let Some(id) = px {
                    store.accum(id, |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[i * c + j] * vv[i];
                            }
                        }
                    });
                }
                if let Some(id) = pv {
                    store.accum(id, |gv| {
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * x[i * c + j];
                            }
                            gv[i] += acc;
                        }
                    });
                }
            },
        ))
    }

    /// Outer difference of two vectors: out[r, l] = a[r] - b[l].
    pub fn outer_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 1 || b.rank() != 1 {
            return Err(Error::contract("outer_diff", "rank-1 tensors required"));
        }
        let (r, l) = (a.numel(), b.numel());
        let tape = resolve_tape("outer_diff", &[a, b])?;
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(r * l);
        for i in 0..r {
            for j in 0..l {
                out.push(ad[i] - bd[j]);
            }
        }
        let (pa, pb) = (a.id(), b.id());
        Ok(make(tape, vec![r, l], Arc::new(out), move |g, store| {
            if let Some(id) = pa {
                store.accum(id, |ga| {
                    for i in 0..r {
                        ga[i] += g[i * l..(i + 1) * l].iter().sum::<f64>();
                    }
                });
            }
            if let Some(id) = pb {
                store.accum(id, |gb| {
                    for i in 0..r {
                        for j in 0..l {
                            gb[j] -= g[i * l + j];
                        }
                    }
                });
            }
        }))
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all entries as a [1] tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let tape = resolve_tape("sum_all", &[self])?;
        let s: f64 = self.data().iter().sum();
        let pid = self.id();
        Ok(make(tape, vec![1], Arc::new(vec![s]), move |g, store| {
            if let Some(id) = pid {
                store.accum(id, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
        }))
    }

    /// Mean of all entries as a [1] tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    // ---- matrix products -------------------------------------------------------

    /// Matrix product [M, K] x [K, N] -> [M, N].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let tape = resolve_tape("matmul", &[self, other])?;
        let mut out = vec![0.0; m * n];
        mm_nn_acc(self.data(), other.data(), &mut out, m, k, n);
        let (a, b) = (self.data_arc(), other.data_arc());
        let (pa, pb) = (self.id(), other.id());
        Ok(make(tape, vec![m, n], Arc::new(out), move |g, store| {
            if let Some(id) = pa {
                // dA = G B^T
                store.accum(id, |ga| mm_nt_acc(g, &b, ga, m, n, k));
            }
            if let Some(id) = pb {
                // dB = A^T G
                store.accum(id, |gb| mm_tn_acc(&a, g, gb, k, m, n));
            }
        }))
    }

    /// Fused product with transposed right operand: [M, K] x [N, K]^T -> [M, N].
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let tape = resolve_tape("matmul_nt", &[self, other])?;
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.data(), other.data(), &mut out, m, k, n);
        let (a, b) = (self.data_arc(), other.data_arc());
        let (pa, pb) = (self.id(), other.id());
        Ok(make(tape, vec![m, n], Arc::new(out), move |g, store| {
            if let Some(id) = pa {
                // dA = G B
                store.accum(id, |ga| mm_nn_acc(g, &b, ga, m, n, k));
            }
            if let Some(id) = pb {
                // dB = G^T A
                store.accum(id, |gb| mm_tn_acc(g, &a, gb, n, m, k));
            }
        }))
    }

    // ---- normalization -----------------------------------------------------

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.rank() == 0 || self.numel() == 0 {
            return Err(Error::domain("softmax_lastdim", "empty tensor"));
        }
        let k = *self.shape().last().unwrap();
        let rows = self.numel() / k;
        let tape = resolve_tape("softmax_lastdim", &[self])?;
        let x = self.data();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let o = &mut out[r * k..(r + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                let e = (xi - m).exp();
                *oi = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for oi in o.iter_mut() {
                *oi *= inv;
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let pid = self.id();
        Ok(make(tape, self.shape().to_vec(), out, move |g, store| {
            if let Some(id) = pid {
                store.accum(id, |gx| {
                    for r in 0..rows {
                        let yr = &y[r * k..(r + 1) * k];
                        let gr = &g[r * k..(r + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let gxr = &mut gx[r * k..(r + 1) * k];
                        for i in 0..k {
                            gxr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
        }))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let k = *self.shape().last().unwrap();
        if gain.rank() != 1 || gain.numel() != k || bias.rank() != 1 || bias.numel() != k {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / k;
        let tape = resolve_tape("layer_norm", &[self, gain, bias])?;
        let x = self.data();
        let (gd, bd) = (gain.data(), bias.data());
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..k {
                let xh = (row[j] - mean) * inv;
                xhat[r * k + j] = xh;
                out[r * k + j] = xh * gd[j] + bd[j];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let gain_d = gain.data_arc();
        let (px, pg, pb) = (self.id(), gain.id(), bias.id());
        Ok(make(
            tape,
            self.shape().to_vec(),
            Arc::new(out),
            move |g, store| {
                if let Some(id) = pg {
                    store.accum(id, |gg| {
                        for r in 0..rows {
                            for j in 0..k {
                                gg[j] += g[r * k + j] * xhat[r * k + j];
                            }
                        }
                    });
                }
                if let Some(id) = pb {
                    store.accum(id, |gb| {
                        for r in 0..rows {
                            for j in 0..k {
                                gb[j] += g[r * k + j];
                            }
                        }
                    });
                }
                if let Some(id) = px {
                    store.accum(id, |gx| {
                        for r in 0..rows {
                            let xh = &xhat[r * k..(r + 1) * k];
                            let gr = &g[r * k..(r + 1) * k];
                            let mut mean_gw = 0.0;
                            let mut mean_gw_xh = 0.0;
                            for j in 0..k {
                                let gw = gr[j] * gain_d[j];
                                mean_gw += gw;
                                mean_gw_xh += gw * xh[j];
                            }
                            mean_gw /= k as f64;
                            mean_gw_xh /= k as f64;
                            let inv = inv_std[r];
                            let gxr = &mut gx[r * k..(r + 1) * k];
                            for j in 0..k {
                                let gw = gr[j] * gain_d[j];
                                gxr[j] += inv * (gw - mean_gw - xh[j] * mean_gw_xh);
                            }
                        }
                    });
                }
            },
        ))
    }

    // ---- convolution ---------------------------------------------------------

    /// 2D convolution: input [Cin, H, W], weight [Cout, Cin, KH, KW],
    /// bias [Cout], zero padding.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 4 || bias.rank() != 1 {
            return Err(Error::contract(
                "conv2d",
                "input rank 3, weight rank 4, bias rank 1 required",
            ));
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin || bias.numel() != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::domain("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let tape = resolve_tape("conv2d", &[self, weight, bias])?;
        let x = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[ci * h * w + iy as usize * w + ix as usize]
                                    * wd[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let (xa, wa) = (self.data_arc(), weight.data_arc());
        let (px, pw, pb) = (self.id(), weight.id(), bias.id());
        Ok(make(
            tape,
            vec![cout, oh, ow],
            Arc::new(out),
            move |g, store| {
                if let Some(id) = pb {
                    store.accum(id, |gb| {
                        for co in 0..cout {
                            gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                        }
                    });
                }
                if let Some(id) = pw {
                    store.accum(id, |gw| {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[co * oh * ow + oy * ow + ox];
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                gw[((co * cin + ci) * kh + ky) * kw + kx] += go
                                                    * xa[ci * h * w
                                                        + iy as usize * w
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(id) = px {
                    store.accum(id, |gx| {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[co * oh * ow + oy * ow + ox];
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                gx[ci * h * w + iy as usize * w + ix as usize] +=
                                                    go * wa[((co * cin + ci) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            },
        ))
    }
}

// ---- raw matmul kernels (also used by backward passes) ----------------------

/// out[m x n] += A[m x k] . B[k x n]
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m x n] += A[m x k] . (B[n x k])^T
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m x n] += (A[k x m])^T . B[k x n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tape;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let a = Tensor::from_rows(&[
            vec![2.0, -1.5, 0.25],
            vec![4.0, 0.0, 7.0],
            vec![-3.0, 8.0, 1.0],
        ])
        .unwrap();
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let out = a.matmul(&b).unwrap();
        // independent triple-loop oracle
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        assert_close(out.data(), &expect, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..20 {
            let a = Tensor::randn(vec![4, 4], 1.0, &mut rng);
            let b = Tensor::randn(vec![4, 4], 1.0, &mut rng);
            let c = Tensor::randn(vec![4, 4], 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert_close(left.data(), right.data(), 1e-9);
        }
    }

    #[test]
    fn matmul_nt_equals_matmul_of_transpose() {
        let mut rng = SplitMix64::new(7);
        let a = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let fused = a.matmul_nt(&b).unwrap();
        let plain = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_close(fused.data(), plain.data(), 1e-12);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        assert_close(y.data(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_ln2_example() {
        let x = Tensor::new(vec![2], vec![0.0, 2.0_f64.ln()]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        assert_close(y.data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..12).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let c = rng.uniform(-20.0, 20.0);
            let x = Tensor::new(vec![3, 4], vals.clone()).unwrap();
            let shifted =
                Tensor::new(vec![3, 4], vals.iter().map(|v| v + c).collect()).unwrap();
            let y = x.softmax_lastdim().unwrap();
            let ys = shifted.softmax_lastdim().unwrap();
            assert_close(y.data(), ys.data(), 1e-12);
            for r in 0..3 {
                let sum: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_through_softmax_matmul_chain_matches_finite_differences() {
        let mut rng = SplitMix64::new(19);
        let a = Tensor::randn(vec![3, 4], 0.7, &mut rng);
        let w = Tensor::randn(vec![4, 3], 0.7, &mut rng);
        let report = crate::tensor::grad_check(
            |p| {
                p[0].matmul(&p[1])?
                    .softmax_lastdim()?
                    .mul(&p[0].matmul(&p[1])?)?
                    .sum_all()
            },
            &[a, w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn elementwise_shape_mismatch_is_error() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![4]);
        assert!(matches!(
            a.add(&b).unwrap_err(),
            Error::ShapeMismatch { op: "add", .. }
        ));
    }

    #[test]
    fn mixing_tapes_is_a_contract_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.watch(&Tensor::scalar(1.0));
        let b = t2.watch(&Tensor::scalar(2.0));
        assert!(matches!(
            a.add(&b).unwrap_err(),
            Error::Contract { .. }
        ));
    }

    #[test]
    fn concat_narrow_roundtrip_both_axes() {
        let mut rng = SplitMix64::new(23);
        let a = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let cat = Tensor::concat(0, &[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[6, 3]);
        assert_close(cat.narrow(0, 0, 2).unwrap().data(), a.data(), 0.0);
        assert_close(cat.narrow(0, 2, 4).unwrap().data(), b.data(), 0.0);

        let c = Tensor::randn(vec![2, 5], 1.0, &mut rng);
        let cat1 = Tensor::concat(1, &[&a, &c]).unwrap();
        assert_eq!(cat1.shape(), &[2, 8]);
        assert_close(cat1.narrow(1, 0, 3).unwrap().data(), a.data(), 0.0);
        assert_close(cat1.narrow(1, 3, 5).unwrap().data(), c.data(), 0.0);
    }

    #[test]
    fn select_rows_accumulates_duplicate_gradients() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let picked = x.select_rows(&[0, 0, 1]).unwrap();
        let loss = picked.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_inputs_record_nothing() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0));
        let before = tape.len();
        let a = Tensor::scalar(3.0);
        let b = Tensor::scalar(4.0);
        let _ = a.mul(&b).unwrap();
        assert_eq!(tape.len(), before);
        let _ = x.detach().mul(&b).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::randn(vec![3, 8], 2.0, &mut rng);
        let gain = Tensor::full(vec![8], 1.0);
        let bias = Tensor::zeros(vec![8]);
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv2d_known_small_case() {
        // 1x2x2 input, 1x1x2x2 kernel of ones, stride 1, no padding: plain sum.
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_close(y.data(), &[10.5], 1e-12);
    }

    #[test]
    fn conv2d_stride_two_shapes() {
        let x = Tensor::zeros(vec![3, 8, 8]);
        let w = Tensor::zeros(vec![5, 3, 3, 3]);
        let b = Tensor::zeros(vec![5]);
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4]);
    }
}
