//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: every operation records its inputs on the
//! produced tensor, and [`Tensor::backward`] walks the resulting graph in
//! reverse topological order, accumulating gradients into every tensor
//! created with `requires_grad`. Vectors are 1×d tensors, scalars 1×1.
//!
//! Broadcasting is deliberately restricted to row-broadcast bias addition
//! (n×d plus 1×d); all other binary ops require exact shape equality.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Elementwise nonlinearity kinds supported by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Silu,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation kind: {other}"))),
        }
    }
}

/// Softmax axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<S: Scalar> {
    Matmul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Add(Tensor<S>, Tensor<S>),
    AddRowBroadcast(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Affine(Tensor<S>, S),
    SoftmaxRows(Tensor<S>),
    Act(Tensor<S>, Activation),
    Ln(Tensor<S>),
    LayerNorm {
        x: Tensor<S>,
        gain: Tensor<S>,
        bias: Tensor<S>,
        // (mean, inv_std) per row, plus the normalized pre-affine values
        stats: Vec<(S, S)>,
        normed: Vec<S>,
    },
    Dropout(Tensor<S>, Vec<S>),
    SumAll(Tensor<S>),
    MeanAll(Tensor<S>),
    MeanRows(Tensor<S>),
    ConcatRows(Vec<Tensor<S>>),
    ConcatCols(Vec<Tensor<S>>),
    SliceRows(Tensor<S>, usize),
    SliceCols(Tensor<S>, usize),
    Clamp(Tensor<S>, S, S),
    SsmScan {
        a: Tensor<S>,
        b: Tensor<S>,
        c: Tensor<S>,
        d: Tensor<S>,
        x: Tensor<S>,
        // saved hidden states, layout [t][channel][state]
        states: Vec<S>,
    },
}

struct Inner<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Option<Op<S>>,
}

/// Shared handle to a tensor node. Clones are shallow: they refer to the
/// same storage and the same gradient slot.
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &(g.rows, g.cols))
            .field("requires_grad", &g.requires_grad)
            .field("data", &g.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn from_parts(rows: usize, cols: usize, data: Vec<S>, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                rows,
                cols,
                data,
                requires_grad: false,
                grad: None,
                op,
            })),
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::Usage(format!(
                "tensor shape {rows}x{cols} does not match data length {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(rows, cols, data, None))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![S::zero(); rows * cols], None)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![S::one(); rows * cols], None)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(1, 1, vec![v], None)
    }

    pub fn row(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_parts(1, n, data, None)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if r == 0 || c == 0 || rows.iter().any(|v| v.len() != c) {
            return Err(Error::Usage("ragged or empty row list".into()));
        }
        Ok(Self::from_parts(r, c, rows.concat(), None))
    }

    /// Trainable parameter initialized from `data`.
    pub fn param(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        let t = Self::new(rows, cols, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    /// Trainable parameter with i.i.d. Gaussian entries of the given std.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: S, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| S::sample_standard_normal(rng) * std)
            .collect();
        let t = Self::from_parts(rows, cols, data, None);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.inner.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let g = self.inner.borrow();
        (g.rows, g.cols)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        let g = self.inner.borrow();
        g.data[i * g.cols + j]
    }

    pub fn item(&self) -> S {
        let g = self.inner.borrow();
        debug_assert_eq!(g.data.len(), 1);
        g.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place, keeping shape and grad slot.
    pub fn set_data(&self, data: &[S]) {
        let mut g = self.inner.borrow_mut();
        assert_eq!(g.data.len(), data.len(), "set_data length mismatch");
        g.data.copy_from_slice(data);
    }

    /// Add `delta` elementwise to the stored values (optimizer use).
    pub fn nudge(&self, idx: usize, delta: S) {
        let mut g = self.inner.borrow_mut();
        g.data[idx] = g.data[idx] + delta;
    }

    /// Leaf copy of the current values; no graph history, no grad.
    pub fn detach(&self) -> Tensor<S> {
        let g = self.inner.borrow();
        Self::from_parts(g.rows, g.cols, g.data.clone(), None)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    fn ptr(&self) -> *const Inner<S> {
        RefCell::as_ptr(&self.inner) as *const Inner<S>
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, k) = self.shape();
        let (k2, m) = other.shape();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (n, k),
                rhs: (k2, m),
            });
        }
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let brow = &b.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_parts(
            n,
            m,
            out,
            Some(Op::Matmul(self.clone(), other.clone())),
        ))
    }

    pub fn transpose(&self) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = g.data[i * m + j];
            }
        }
        drop(g);
        Tensor::from_parts(m, n, out, Some(Op::Transpose(self.clone())))
    }

    /// Elementwise add; accepts a 1×d right operand against an n×d left
    /// operand (row broadcast for biases).
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, m) = self.shape();
        let (n2, m2) = other.shape();
        if n2 == 1 && m2 == m && n > 1 {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            let mut out = a.data.clone();
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = out[i * m + j] + b.data[j];
                }
            }
            drop(a);
            drop(b);
            return Ok(Tensor::from_parts(
                n,
                m,
                out,
                Some(Op::AddRowBroadcast(self.clone(), other.clone())),
            ));
        }
        if (n, m) != (n2, m2) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: (n, m),
                rhs: (n2, m2),
            });
        }
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_parts(
            n,
            m,
            out,
            Some(Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.add(&other.scale(-S::one()))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, m) = self.shape();
        if (n, m) != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: (n, m),
                rhs: other.shape(),
            });
        }
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_parts(
            n,
            m,
            out,
            Some(Op::Mul(self.clone(), other.clone())),
        ))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&self, scale: S, shift: S) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let out = g.data.iter().map(|&v| scale * v + shift).collect();
        drop(g);
        Tensor::from_parts(n, m, out, Some(Op::Affine(self.clone(), scale)))
    }

    pub fn scale(&self, scale: S) -> Tensor<S> {
        self.affine(scale, S::zero())
    }

    pub fn softmax(&self, axis: Axis) -> Tensor<S> {
        match axis {
            Axis::Rows => self.softmax_rows(),
            Axis::Cols => self.transpose().softmax_rows().transpose(),
        }
    }

    /// Softmax along each row, with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &g.data[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(row[0], S::max);
            let mut sum = S::zero();
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum = sum + e;
            }
            for j in 0..m {
                out[i * m + j] = out[i * m + j] / sum;
            }
        }
        drop(g);
        Tensor::from_parts(n, m, out, Some(Op::SoftmaxRows(self.clone())))
    }

    pub fn activation(&self, kind: Activation) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let one = S::one();
        let out = g
            .data
            .iter()
            .map(|&v| match kind {
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => one / (one + (-v).exp()),
                Activation::Relu => v.max(S::zero()),
                Activation::Silu => v / (one + (-v).exp()),
            })
            .collect();
        drop(g);
        Tensor::from_parts(n, m, out, Some(Op::Act(self.clone(), kind)))
    }

    pub fn tanh_act(&self) -> Tensor<S> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.activation(Activation::Sigmoid)
    }

    pub fn relu(&self) -> Tensor<S> {
        self.activation(Activation::Relu)
    }

    pub fn silu(&self) -> Tensor<S> {
        self.activation(Activation::Silu)
    }

    /// Elementwise natural log. Caller guarantees positive entries.
    pub fn ln_elem(&self) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let out = g.data.iter().map(|&v| v.ln()).collect();
        drop(g);
        Tensor::from_parts(n, m, out, Some(Op::Ln(self.clone())))
    }

    /// Per-row layer normalization with learned gain and bias (both 1×d).
    /// Epsilon 1e-5 inside the square root.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, m) = self.shape();
        if gain.shape() != (1, m) || bias.shape() != (1, m) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: (n, m),
                rhs: gain.shape(),
            });
        }
        let eps = S::from_f64(1e-5);
        let g = self.inner.borrow();
        let gg = gain.inner.borrow();
        let bb = bias.inner.borrow();
        let mf = S::from_f64(m as f64);
        let mut out = vec![S::zero(); n * m];
        let mut normed = vec![S::zero(); n * m];
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let row = &g.data[i * m..(i + 1) * m];
            let mean = row.iter().fold(S::zero(), |s, &v| s + v) / mf;
            let var = row
                .iter()
                .fold(S::zero(), |s, &v| s + (v - mean) * (v - mean))
                / mf;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..m {
                let xh = (row[j] - mean) * inv_std;
                normed[i * m + j] = xh;
                out[i * m + j] = gg.data[j] * xh + bb.data[j];
            }
            stats.push((mean, inv_std));
        }
        drop(g);
        drop(gg);
        drop(bb);
        Ok(Tensor::from_parts(
            n,
            m,
            out,
            Some(Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                stats,
                normed,
            }),
        ))
    }

    /// Inverted dropout. In eval mode (`training == false`) this is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let (n, m) = self.shape();
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..n * m)
            .map(|_| {
                if S::sample_unit(rng).to_f64_lossy() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let g = self.inner.borrow();
        let out = g.data.iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        drop(g);
        Ok(Tensor::from_parts(
            n,
            m,
            out,
            Some(Op::Dropout(self.clone(), mask)),
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let g = self.inner.borrow();
        let s = g.data.iter().fold(S::zero(), |a, &v| a + v);
        drop(g);
        Tensor::from_parts(1, 1, vec![s], Some(Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let g = self.inner.borrow();
        let nf = S::from_f64(g.data.len() as f64);
        let s = g.data.iter().fold(S::zero(), |a, &v| a + v) / nf;
        drop(g);
        Tensor::from_parts(1, 1, vec![s], Some(Op::MeanAll(self.clone())))
    }

    /// Column means: n×d collapses to 1×d.
    pub fn mean_rows(&self) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let nf = S::from_f64(n as f64);
        let mut out = vec![S::zero(); m];
        for i in 0..n {
            for j in 0..m {
                out[j] = out[j] + g.data[i * m + j];
            }
        }
        for v in &mut out {
            *v = *v / nf;
        }
        drop(g);
        Tensor::from_parts(1, m, out, Some(Op::MeanRows(self.clone())))
    }

    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".into()));
        }
        let m = parts[0].cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.cols() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            n += p.rows();
            data.extend(p.inner.borrow().data.iter().copied());
        }
        Ok(Tensor::from_parts(
            n,
            m,
            data,
            Some(Op::ConcatRows(parts.to_vec())),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let n = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![S::zero(); n * total];
        let mut off = 0;
        for p in parts {
            if p.rows() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            let pm = p.cols();
            let pg = p.inner.borrow();
            for i in 0..n {
                data[i * total + off..i * total + off + pm]
                    .copy_from_slice(&pg.data[i * pm..(i + 1) * pm]);
            }
            off += pm;
        }
        Ok(Tensor::from_parts(
            n,
            total,
            data,
            Some(Op::ConcatCols(parts.to_vec())),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (n, m) = self.shape();
        if start + len > n || len == 0 {
            return Err(Error::Usage(format!(
                "slice_rows {start}..{} out of range for {n} rows",
                start + len
            )));
        }
        let g = self.inner.borrow();
        let data = g.data[start * m..(start + len) * m].to_vec();
        drop(g);
        Ok(Tensor::from_parts(
            len,
            m,
            data,
            Some(Op::SliceRows(self.clone(), start)),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (n, m) = self.shape();
        if start + len > m || len == 0 {
            return Err(Error::Usage(format!(
                "slice_cols {start}..{} out of range for {m} cols",
                start + len
            )));
        }
        let g = self.inner.borrow();
        let mut data = vec![S::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&g.data[i * m + start..i * m + start + len]);
        }
        drop(g);
        Ok(Tensor::from_parts(
            n,
            len,
            data,
            Some(Op::SliceCols(self.clone(), start)),
        ))
    }

    /// Clamp to [lo, hi]. Gradient passes through strictly interior values.
    pub fn clamp_vals(&self, lo: S, hi: S) -> Tensor<S> {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let out = g.data.iter().map(|&v| v.max(lo).min(hi)).collect();
        drop(g);
        Tensor::from_parts(n, m, out, Some(Op::Clamp(self.clone(), lo, hi)))
    }

    /// Per-channel diagonal state-space recurrence over a sequence.
    ///
    /// `x` is N×d; `a`, `b`, `c` are d×d_state (row per channel); `d_skip`
    /// is 1×d. Channel ch evolves `h_t = a ⊙ h_{t-1} + b · x[t,ch]` and
    /// emits `y[t,ch] = c · h_t + d_skip[ch] · x[t,ch]`.
    pub fn ssm_scan(
        a: &Tensor<S>,
        b: &Tensor<S>,
        c: &Tensor<S>,
        d_skip: &Tensor<S>,
        x: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let (seq, ch) = x.shape();
        let (ch2, dstate) = a.shape();
        if ch2 != ch || b.shape() != (ch, dstate) || c.shape() != (ch, dstate) {
            return Err(Error::ShapeMismatch {
                op: "ssm_scan",
                lhs: (ch, dstate),
                rhs: x.shape(),
            });
        }
        if d_skip.shape() != (1, ch) {
            return Err(Error::ShapeMismatch {
                op: "ssm_scan",
                lhs: (1, ch),
                rhs: d_skip.shape(),
            });
        }
        let ag = a.inner.borrow();
        let bg = b.inner.borrow();
        let cg = c.inner.borrow();
        let dg = d_skip.inner.borrow();
        let xg = x.inner.borrow();
        let mut states = vec![S::zero(); seq * ch * dstate];
        let mut y = vec![S::zero(); seq * ch];
        for t in 0..seq {
            for k in 0..ch {
                let xv = xg.data[t * ch + k];
                let arow = &ag.data[k * dstate..(k + 1) * dstate];
                let brow = &bg.data[k * dstate..(k + 1) * dstate];
                let crow = &cg.data[k * dstate..(k + 1) * dstate];
                let mut acc = dg.data[k] * xv;
                for s in 0..dstate {
                    let prev = if t == 0 {
                        S::zero()
                    } else {
                        states[(t - 1) * ch * dstate + k * dstate + s]
                    };
                    let h = arow[s] * prev + brow[s] * xv;
                    states[t * ch * dstate + k * dstate + s] = h;
                    acc = acc + crow[s] * h;
                }
                if !acc.is_finite() {
                    return Err(Error::Overflow {
                        what: "ssm_scan".into(),
                        step: t,
                    });
                }
                y[t * ch + k] = acc;
            }
        }
        drop(ag);
        drop(bg);
        drop(cg);
        drop(dg);
        drop(xg);
        Ok(Tensor::from_parts(
            seq,
            ch,
            y,
            Some(Op::SsmScan {
                a: a.clone(),
                b: b.clone(),
                c: c.clone(),
                d: d_skip.clone(),
                x: x.clone(),
                states,
            }),
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar loss. Accumulates `∂loss/∂t` into
    /// every reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        accumulate(self, &[S::one()]);
        for node in order.iter().rev() {
            let grad = match node.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let has_op = node.inner.borrow().op.is_some();
            if has_op {
                node.propagate(&grad);
            }
        }
        // Intermediate grads were only scaffolding; keep them on leaves.
        for node in &order {
            let mut g = node.inner.borrow_mut();
            if g.op.is_some() {
                g.grad = None;
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<S>> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.ptr()) {
                continue;
            }
            let parents = node.parents();
            stack.push((node, true));
            for p in parents {
                if !seen.contains(&p.ptr()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }

    fn parents(&self) -> Vec<Tensor<S>> {
        let g = self.inner.borrow();
        match &g.op {
            None => vec![],
            Some(op) => match op {
                Op::Matmul(a, b) | Op::Add(a, b) | Op::AddRowBroadcast(a, b) | Op::Mul(a, b) => {
                    vec![a.clone(), b.clone()]
                }
                Op::Transpose(a)
                | Op::Affine(a, _)
                | Op::SoftmaxRows(a)
                | Op::Act(a, _)
                | Op::Ln(a)
                | Op::Dropout(a, _)
                | Op::SumAll(a)
                | Op::MeanAll(a)
                | Op::MeanRows(a)
                | Op::SliceRows(a, _)
                | Op::SliceCols(a, _)
                | Op::Clamp(a, _, _) => vec![a.clone()],
                Op::LayerNorm { x, gain, bias, .. } => {
                    vec![x.clone(), gain.clone(), bias.clone()]
                }
                Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
                Op::SsmScan { a, b, c, d, x, .. } => {
                    vec![a.clone(), b.clone(), c.clone(), d.clone(), x.clone()]
                }
            },
        }
    }

    fn propagate(&self, grad: &[S]) {
        let (n, m) = self.shape();
        let g = self.inner.borrow();
        let op = g.op.as_ref().expect("propagate on leaf");
        match op {
            Op::Matmul(a, b) => {
                let (ar, ak) = a.shape();
                let bm = b.cols();
                if wants_grad(a) {
                    let bd = b.inner.borrow().data.clone();
                    let mut ga = vec![S::zero(); ar * ak];
                    for i in 0..ar {
                        for j in 0..bm {
                            let gv = grad[i * bm + j];
                            if gv == S::zero() {
                                continue;
                            }
                            for p in 0..ak {
                                ga[i * ak + p] = ga[i * ak + p] + gv * bd[p * bm + j];
                            }
                        }
                    }
                    accumulate(a, &ga);
                }
                if wants_grad(b) {
                    let ad = a.inner.borrow().data.clone();
                    let mut gb = vec![S::zero(); ak * bm];
                    for i in 0..ar {
                        for p in 0..ak {
                            let av = ad[i * ak + p];
                            if av == S::zero() {
                                continue;
                            }
                            for j in 0..bm {
                                gb[p * bm + j] = gb[p * bm + j] + av * grad[i * bm + j];
                            }
                        }
                    }
                    accumulate(b, &gb);
                }
            }
            Op::Transpose(a) => {
                if wants_grad(a) {
                    let mut ga = vec![S::zero(); n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] = grad[i * m + j];
                        }
                    }
                    accumulate(a, &ga);
                }
            }
            Op::Add(a, b) => {
                if wants_grad(a) {
                    accumulate(a, grad);
                }
                if wants_grad(b) {
                    accumulate(b, grad);
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if wants_grad(a) {
                    accumulate(a, grad);
                }
                if wants_grad(b) {
                    let mut gb = vec![S::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] = gb[j] + grad[i * m + j];
                        }
                    }
                    accumulate(b, &gb);
                }
            }
            Op::Mul(a, b) => {
                if wants_grad(a) {
                    let bd = b.inner.borrow().data.clone();
                    let ga: Vec<S> = grad.iter().zip(&bd).map(|(&g, &v)| g * v).collect();
                    accumulate(a, &ga);
                }
                if wants_grad(b) {
                    let ad = a.inner.borrow().data.clone();
                    let gb: Vec<S> = grad.iter().zip(&ad).map(|(&g, &v)| g * v).collect();
                    accumulate(b, &gb);
                }
            }
            Op::Affine(a, scale) => {
                if wants_grad(a) {
                    let ga: Vec<S> = grad.iter().map(|&g| g * *scale).collect();
                    accumulate(a, &ga);
                }
            }
            Op::SoftmaxRows(a) => {
                if wants_grad(a) {
                    let y = &g.data;
                    let mut ga = vec![S::zero(); n * m];
                    for i in 0..n {
                        let mut dot = S::zero();
                        for j in 0..m {
                            dot = dot + grad[i * m + j] * y[i * m + j];
                        }
                        for j in 0..m {
                            ga[i * m + j] = y[i * m + j] * (grad[i * m + j] - dot);
                        }
                    }
                    accumulate(a, &ga);
                }
            }
            Op::Act(a, kind) => {
                if wants_grad(a) {
                    let one = S::one();
                    let xd = a.inner.borrow().data.clone();
                    let y = &g.data;
                    let ga: Vec<S> = (0..n * m)
                        .map(|idx| {
                            let d = match kind {
                                Activation::Tanh => one - y[idx] * y[idx],
                                Activation::Sigmoid => y[idx] * (one - y[idx]),
                                Activation::Relu => {
                                    if xd[idx] > S::zero() {
                                        one
                                    } else {
                                        S::zero()
                                    }
                                }
                                Activation::Silu => {
                                    let s = one / (one + (-xd[idx]).exp());
                                    s + xd[idx] * s * (one - s)
                                }
                            };
                            grad[idx] * d
                        })
                        .collect();
                    accumulate(a, &ga);
                }
            }
            Op::Ln(a) => {
                if wants_grad(a) {
                    let xd = a.inner.borrow().data.clone();
                    let ga: Vec<S> = grad.iter().zip(&xd).map(|(&g, &v)| g / v).collect();
                    accumulate(a, &ga);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
                normed,
            } => {
                let gaind = gain.inner.borrow().data.clone();
                let mf = S::from_f64(m as f64);
                if wants_grad(x) {
                    let mut gx = vec![S::zero(); n * m];
                    for i in 0..n {
                        let (_, inv_std) = stats[i];
                        let mut mean_dy = S::zero();
                        let mut mean_dy_xh = S::zero();
                        for j in 0..m {
                            let dy = grad[i * m + j] * gaind[j];
                            mean_dy = mean_dy + dy;
                            mean_dy_xh = mean_dy_xh + dy * normed[i * m + j];
                        }
                        mean_dy = mean_dy / mf;
                        mean_dy_xh = mean_dy_xh / mf;
                        for j in 0..m {
                            let dy = grad[i * m + j] * gaind[j];
                            gx[i * m + j] =
                                inv_std * (dy - mean_dy - normed[i * m + j] * mean_dy_xh);
                        }
                    }
                    accumulate(x, &gx);
                }
                if wants_grad(gain) {
                    let mut gg = vec![S::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            gg[j] = gg[j] + grad[i * m + j] * normed[i * m + j];
                        }
                    }
                    accumulate(gain, &gg);
                }
                if wants_grad(bias) {
                    let mut gb = vec![S::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] = gb[j] + grad[i * m + j];
                        }
                    }
                    accumulate(bias, &gb);
                }
            }
            Op::Dropout(a, mask) => {
                if wants_grad(a) {
                    let ga: Vec<S> = grad.iter().zip(mask).map(|(&g, &k)| g * k).collect();
                    accumulate(a, &ga);
                }
            }
            Op::SumAll(a) => {
                if wants_grad(a) {
                    let ga = vec![grad[0]; a.len()];
                    accumulate(a, &ga);
                }
            }
            Op::MeanAll(a) => {
                if wants_grad(a) {
                    let nf = S::from_f64(a.len() as f64);
                    let ga = vec![grad[0] / nf; a.len()];
                    accumulate(a, &ga);
                }
            }
            Op::MeanRows(a) => {
                if wants_grad(a) {
                    let an = a.rows();
                    let nf = S::from_f64(an as f64);
                    let mut ga = vec![S::zero(); an * m];
                    for i in 0..an {
                        for j in 0..m {
                            ga[i * m + j] = grad[j] / nf;
                        }
                    }
                    accumulate(a, &ga);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = p.rows();
                    if wants_grad(p) {
                        accumulate(p, &grad[off * m..(off + pr) * m]);
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pm = p.cols();
                    if wants_grad(p) {
                        let mut gp = vec![S::zero(); n * pm];
                        for i in 0..n {
                            gp[i * pm..(i + 1) * pm]
                                .copy_from_slice(&grad[i * m + off..i * m + off + pm]);
                        }
                        accumulate(p, &gp);
                    }
                    off += pm;
                }
            }
            Op::SliceRows(a, start) => {
                if wants_grad(a) {
                    let (an, am) = a.shape();
                    let mut ga = vec![S::zero(); an * am];
                    ga[start * am..(start + n) * am].copy_from_slice(grad);
                    accumulate(a, &ga);
                }
            }
            Op::SliceCols(a, start) => {
                if wants_grad(a) {
                    let (an, am) = a.shape();
                    let mut ga = vec![S::zero(); an * am];
                    for i in 0..n {
                        ga[i * am + start..i * am + start + m]
                            .copy_from_slice(&grad[i * m..(i + 1) * m]);
                    }
                    accumulate(a, &ga);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants_grad(a) {
                    let xd = a.inner.borrow().data.clone();
                    let ga: Vec<S> = grad
                        .iter()
                        .zip(&xd)
                        .map(|(&g, &v)| if v > *lo && v < *hi { g } else { S::zero() })
                        .collect();
                    accumulate(a, &ga);
                }
            }
            Op::SsmScan {
                a,
                b,
                c,
                d,
                x,
                states,
            } => {
                let (seq, ch) = x.shape();
                let dstate = a.cols();
                let ad = a.inner.borrow().data.clone();
                let bd = b.inner.borrow().data.clone();
                let cd = c.inner.borrow().data.clone();
                let dd = d.inner.borrow().data.clone();
                let xd = x.inner.borrow().data.clone();
                let mut ga = vec![S::zero(); ch * dstate];
                let mut gb = vec![S::zero(); ch * dstate];
                let mut gc = vec![S::zero(); ch * dstate];
                let mut gd = vec![S::zero(); ch];
                let mut gx = vec![S::zero(); seq * ch];
                let mut lam = vec![S::zero(); dstate];
                for k in 0..ch {
                    lam.iter_mut().for_each(|v| *v = S::zero());
                    let arow = &ad[k * dstate..(k + 1) * dstate];
                    let brow = &bd[k * dstate..(k + 1) * dstate];
                    let crow = &cd[k * dstate..(k + 1) * dstate];
                    for t in (0..seq).rev() {
                        let gy = grad[t * ch + k];
                        let xv = xd[t * ch + k];
                        gd[k] = gd[k] + gy * xv;
                        let mut gx_acc = gy * dd[k];
                        for s in 0..dstate {
                            let h = states[t * ch * dstate + k * dstate + s];
                            gc[k * dstate + s] = gc[k * dstate + s] + gy * h;
                            let l = gy * crow[s] + arow[s] * lam[s];
                            let h_prev = if t == 0 {
                                S::zero()
                            } else {
                                states[(t - 1) * ch * dstate + k * dstate + s]
                            };
                            ga[k * dstate + s] = ga[k * dstate + s] + l * h_prev;
                            gb[k * dstate + s] = gb[k * dstate + s] + l * xv;
                            gx_acc = gx_acc + brow[s] * l;
                            lam[s] = l;
                        }
                        gx[t * ch + k] = gx_acc;
                    }
                }
                if wants_grad(a) {
                    accumulate(a, &ga);
                }
                if wants_grad(b) {
                    accumulate(b, &gb);
                }
                if wants_grad(c) {
                    accumulate(c, &gc);
                }
                if wants_grad(d) {
                    accumulate(d, &gd);
                }
                if wants_grad(x) {
                    accumulate(x, &gx);
                }
            }
        }
    }
}

fn wants_grad<S: Scalar>(t: &Tensor<S>) -> bool {
    let g = t.inner.borrow();
    g.requires_grad || g.op.is_some()
}

fn accumulate<S: Scalar>(t: &Tensor<S>, delta: &[S]) {
    let mut g = t.inner.borrow_mut();
    match &mut g.grad {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + *d;
            }
        }
        None => g.grad = Some(delta.to_vec()),
    }
}
