//! Temporal encoder: a stack of gated blocks around a per-channel diagonal
//! linear state-space recurrence, plus an associative parallel scan that
//! reproduces the sequential recurrence to within summation-order noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardCtx;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub blocks: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_model: 64,
            d_state: 8,
            blocks: 2,
        }
    }
}

/// One gated SSM block. The state transition is parameterized through a
/// sigmoid, so every diagonal entry of A stays in (0, 1) throughout
/// training (stability invariant).
pub struct SsmBlock<S: Scalar> {
    pub w_in: Tensor<S>,
    pub b_in: Tensor<S>,
    /// Raw pre-sigmoid state-transition weights, d_model×d_state.
    pub a_raw: Tensor<S>,
    pub b_mat: Tensor<S>,
    pub c_mat: Tensor<S>,
    pub d_skip: Tensor<S>,
    pub w_out: Tensor<S>,
}

pub struct SsmParams<S: Scalar> {
    pub config: SsmConfig,
    pub blocks: Vec<SsmBlock<S>>,
}

impl<S: Scalar> SsmBlock<S> {
    fn init<R: Rng + ?Sized>(config: &SsmConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let n = config.d_state;
        let std = S::from_f64(0.02);
        SsmBlock {
            w_in: Tensor::randn(d, d, std, rng),
            b_in: Tensor::param(1, d, vec![S::zero(); d]).unwrap(),
            a_raw: Tensor::randn(d, n, S::one(), rng),
            b_mat: Tensor::randn(d, n, S::from_f64(0.5), rng),
            c_mat: Tensor::randn(d, n, S::from_f64(0.5), rng),
            d_skip: Tensor::param(1, d, vec![S::one(); d]).unwrap(),
            w_out: Tensor::randn(d, d, std, rng),
        }
    }

    /// Stable diagonal transition: sigmoid of the raw weights.
    pub fn transition(&self) -> Tensor<S> {
        self.a_raw.sigmoid()
    }

    /// input projection → gating nonlinearity → scan → output projection
    /// → residual add.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let u = x.matmul(&self.w_in)?.add(&self.b_in)?.silu();
        let y = Tensor::ssm_scan(&self.transition(), &self.b_mat, &self.c_mat, &self.d_skip, &u)?;
        x.add(&y.matmul(&self.w_out)?)
    }
}

impl<S: Scalar> SsmParams<S> {
    pub fn init<R: Rng + ?Sized>(config: SsmConfig, rng: &mut R) -> Result<Self> {
        if config.d_model == 0 || config.d_state == 0 || config.blocks == 0 {
            return Err(Error::Config("ssm dims and block count must be >= 1".into()));
        }
        let blocks = (0..config.blocks)
            .map(|_| SsmBlock::init(&config, rng))
            .collect();
        Ok(SsmParams { config, blocks })
    }

    pub fn params(&self) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for (i, b) in self.blocks.iter().enumerate() {
            ps.push(format!("block{i}.w_in"), b.w_in.clone());
            ps.push(format!("block{i}.b_in"), b.b_in.clone());
            ps.push(format!("block{i}.a_raw"), b.a_raw.clone());
            ps.push(format!("block{i}.b_mat"), b.b_mat.clone());
            ps.push(format!("block{i}.c_mat"), b.c_mat.clone());
            ps.push(format!("block{i}.d_skip"), b.d_skip.clone());
            ps.push(format!("block{i}.w_out"), b.w_out.clone());
        }
        ps
    }
}

/// Temporal encoding of the spatial token sequence; shape-preserving.
pub fn encode_temporal<S: Scalar>(
    h_vit: &Tensor<S>,
    params: &SsmParams<S>,
    _ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let mut h = h_vit.clone();
    for block in &params.blocks {
        h = block.forward(&h)?;
    }
    Ok(h)
}

/// Mean over the token axis.
pub fn pool<S: Scalar>(h: &Tensor<S>) -> Tensor<S> {
    h.mean_rows()
}

/// Associative-scan evaluation of the same recurrence as
/// [`Tensor::ssm_scan`]. Forward-only (produces a leaf tensor). Returns
/// the output and the number of combine rounds executed, which is
/// ⌈log₂ N⌉ — the sequential dependency depth of the parallel form.
pub fn ssm_scan_parallel<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, usize)> {
    let (seq, ch) = x.shape();
    let (ch2, dstate) = a.shape();
    if ch2 != ch || b.shape() != (ch, dstate) || c.shape() != (ch, dstate) || d_skip.shape() != (1, ch)
    {
        return Err(Error::ShapeMismatch {
            op: "ssm_scan_parallel",
            lhs: (ch, dstate),
            rhs: x.shape(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let cd = c.data();
    let dd = d_skip.data();
    let xd = x.data();
    let mut y = vec![S::zero(); seq * ch];
    let mut rounds = 0usize;
    // Element t of the scan is the affine map h ↦ coef·h + off with
    // coef = a, off = b·x_t; composition is associative, so an inclusive
    // Hillis-Steele scan yields every prefix in ⌈log₂ N⌉ rounds.
    let mut coef = vec![S::zero(); seq];
    let mut off = vec![S::zero(); seq];
    let mut next_coef = vec![S::zero(); seq];
    let mut next_off = vec![S::zero(); seq];
    for k in 0..ch {
        for s in 0..dstate {
            let av = ad[k * dstate + s];
            let bv = bd[k * dstate + s];
            for t in 0..seq {
                coef[t] = av;
                off[t] = bv * xd[t * ch + k];
            }
            let mut local_rounds = 0;
            let mut offset = 1;
            while offset < seq {
                for t in 0..seq {
                    if t >= offset {
                        next_coef[t] = coef[t - offset] * coef[t];
                        next_off[t] = coef[t] * off[t - offset] + off[t];
                    } else {
                        next_coef[t] = coef[t];
                        next_off[t] = off[t];
                    }
                }
                std::mem::swap(&mut coef, &mut next_coef);
                std::mem::swap(&mut off, &mut next_off);
                offset <<= 1;
                local_rounds += 1;
            }
            rounds = rounds.max(local_rounds);
            // h_0 = 0, so each prefix offset is the state itself
            let cv = cd[k * dstate + s];
            for t in 0..seq {
                y[t * ch + k] = y[t * ch + k] + cv * off[t];
            }
        }
        for t in 0..seq {
            let v = y[t * ch + k] + dd[k] * xd[t * ch + k];
            if !v.is_finite() {
                return Err(Error::Overflow {
                    what: "ssm_scan_parallel".into(),
                    step: t,
                });
            }
            y[t * ch + k] = v;
        }
    }
    Ok((Tensor::new(seq, ch, y)?, rounds))
}
