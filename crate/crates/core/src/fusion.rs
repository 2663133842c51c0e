//! Multimodal fusion head: per-modality projections into a shared space,
//! attention / early / late combination strategies, the sigmoid
//! classification head, and the binary cross-entropy loss.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Activation, Tensor};

/// Probability clamp applied before the log in the loss and when
/// reporting probabilities.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Hybrid,
    Early,
    Late,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Hybrid => "hybrid",
            FusionStrategy::Early => "early",
            FusionStrategy::Late => "late",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(FusionStrategy::Hybrid),
            "early" => Ok(FusionStrategy::Early),
            "late" => Ok(FusionStrategy::Late),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

/// Attention weights over the fused modalities for one example, in the
/// order the modality rows were stacked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionExplanation {
    pub modalities: Vec<String>,
    pub weights: Vec<f64>,
}

/// Attention fusion over M modality rows stacked as an M×d matrix:
/// score_i = vᵀ·tanh(f_i·W), α = softmax(score), output = Σ α_i·f_i.
/// Returns the fused 1×d row and the 1×M weight row.
pub fn attention_fusion<S: Scalar>(
    stacked: &Tensor<S>,
    w_att: &Tensor<S>,
    v_att: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (m, d) = stacked.shape();
    if m == 0 || d == 0 {
        return Err(Error::Usage("attention_fusion needs a nonempty stack".into()));
    }
    // M×d_att scores projected to M×1, transposed to a softmax row
    let scores = stacked
        .matmul(w_att)?
        .activation(Activation::Tanh)
        .matmul(v_att)?
        .transpose();
    let alphas = scores.softmax_rows();
    let fused = alphas.matmul(stacked)?;
    Ok((fused, alphas))
}

/// Early fusion: plain concatenation of the modality rows.
pub fn early_fusion<S: Scalar>(rows: &[Tensor<S>]) -> Result<Tensor<S>> {
    if rows.is_empty() {
        return Err(Error::Usage("early_fusion needs at least one modality".into()));
    }
    Tensor::concat_cols(rows)
}

/// Late fusion: unweighted mean of per-modality probabilities. Inputs
/// must already be probabilities.
pub fn late_fusion<S: Scalar>(probs: &[Tensor<S>]) -> Result<Tensor<S>> {
    if probs.is_empty() {
        return Err(Error::Usage("late_fusion needs at least one probability".into()));
    }
    for p in probs {
        if p.shape() != (1, 1) {
            return Err(Error::Usage("late_fusion expects scalar probabilities".into()));
        }
        let v = p.item().to_f64_lossy();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Usage(format!(
                "late_fusion input {v} outside [0, 1]"
            )));
        }
    }
    let mut acc = probs[0].clone();
    for p in &probs[1..] {
        acc = acc.add(p)?;
    }
    Ok(acc.scale(S::from_f64(1.0 / probs.len() as f64)))
}

/// Sigmoid of the scalar logit, clamped away from {0, 1} so the loss
/// stays finite.
pub fn classify<S: Scalar>(logit: &Tensor<S>) -> Result<Tensor<S>> {
    if logit.shape() != (1, 1) {
        return Err(Error::Usage("classify expects a scalar logit".into()));
    }
    let eps = S::from_f64(PROB_EPSILON);
    Ok(logit.sigmoid().clamp_vals(eps, S::one() - eps))
}

/// Binary cross-entropy for a single clamped probability against a 0/1
/// label.
pub fn bce_loss<S: Scalar>(prob: &Tensor<S>, label: u8) -> Result<Tensor<S>> {
    if prob.shape() != (1, 1) {
        return Err(Error::Usage("bce_loss expects a scalar probability".into()));
    }
    let p = if label == 1 {
        prob.clone()
    } else {
        // 1 - p via affine
        prob.affine(S::from_f64(-1.0), S::one())
    };
    Ok(p.ln_elem().scale(S::from_f64(-1.0)))
}

/// Learned fusion head. Each modality gets its own linear projection into
/// a shared d_f space; the strategy decides how the projected rows are
/// combined before the final linear classifier.
pub struct FusionHead<S: Scalar> {
    pub strategy: FusionStrategy,
    pub modality_names: Vec<String>,
    pub d_fuse: usize,
    /// One (weight, bias) pair per modality, in `modality_names` order.
    pub projections: Vec<(Tensor<S>, Tensor<S>)>,
    pub w_att: Tensor<S>,
    pub v_att: Tensor<S>,
    /// Classifier over the fused row: d_f×1 for hybrid/late, (M·d_f)×1
    /// for early.
    pub w_cls: Tensor<S>,
    pub b_cls: Tensor<S>,
    /// Per-modality classifiers, used by late fusion only.
    pub late_heads: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> FusionHead<S> {
    pub fn init<R: Rng + ?Sized>(
        strategy: FusionStrategy,
        modality_dims: &[(String, usize)],
        d_fuse: usize,
        d_att: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if modality_dims.is_empty() {
            return Err(Error::Config("fusion head needs at least one modality".into()));
        }
        if d_fuse == 0 || d_att == 0 {
            return Err(Error::Config("fusion dims must be >= 1".into()));
        }
        let std = S::from_f64(0.02);
        let projections = modality_dims
            .iter()
            .map(|(_, dim)| {
                (
                    Tensor::randn(*dim, d_fuse, std, rng),
                    Tensor::param(1, d_fuse, vec![S::zero(); d_fuse]).unwrap(),
                )
            })
            .collect();
        let m = modality_dims.len();
        let cls_in = match strategy {
            FusionStrategy::Early => m * d_fuse,
            _ => d_fuse,
        };
        Ok(FusionHead {
            strategy,
            modality_names: modality_dims.iter().map(|(n, _)| n.clone()).collect(),
            d_fuse,
            projections: projections,
            w_att: Tensor::randn(d_fuse, d_att, std, rng),
            v_att: Tensor::randn(d_att, 1, std, rng),
            w_cls: Tensor::randn(cls_in, 1, std, rng),
            b_cls: Tensor::param(1, 1, vec![S::zero()]).unwrap(),
            late_heads: (0..m)
                .map(|_| {
                    (
                        Tensor::randn(d_fuse, 1, std, rng),
                        Tensor::param(1, 1, vec![S::zero()]).unwrap(),
                    )
                })
                .collect(),
        })
    }

    pub fn params(&self) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for (name, (w, b)) in self.modality_names.iter().zip(&self.projections) {
            ps.push(format!("proj.{name}.w"), w.clone());
            ps.push(format!("proj.{name}.b"), b.clone());
        }
        match self.strategy {
            FusionStrategy::Hybrid => {
                ps.push("att.w", self.w_att.clone());
                ps.push("att.v", self.v_att.clone());
                ps.push("cls.w", self.w_cls.clone());
                ps.push("cls.b", self.b_cls.clone());
            }
            FusionStrategy::Early => {
                ps.push("cls.w", self.w_cls.clone());
                ps.push("cls.b", self.b_cls.clone());
            }
            FusionStrategy::Late => {
                for (name, (w, b)) in self.modality_names.iter().zip(&self.late_heads) {
                    ps.push(format!("late.{name}.w"), w.clone());
                    ps.push(format!("late.{name}.b"), b.clone());
                }
            }
        }
        ps
    }

    /// Project raw modality rows and combine them per the strategy.
    /// Returns the probability and, for the attention strategy, the
    /// fusion weights.
    pub fn forward(&self, rows: &[Tensor<S>]) -> Result<(Tensor<S>, Option<FusionExplanation>)> {
        if rows.len() != self.projections.len() {
            return Err(Error::Usage(format!(
                "fusion head got {} modalities, expected {}",
                rows.len(),
                self.projections.len()
            )));
        }
        let projected: Vec<Tensor<S>> = rows
            .iter()
            .zip(&self.projections)
            .map(|(r, (w, b))| {
                r.matmul(w)?.add(b).map(|t| t.activation(Activation::Tanh))
            })
            .collect::<Result<_>>()?;
        match self.strategy {
            FusionStrategy::Hybrid => {
                let stacked = Tensor::concat_rows(&projected)?;
                let (fused, alphas) = attention_fusion(&stacked, &self.w_att, &self.v_att)?;
                let logit = fused.matmul(&self.w_cls)?.add(&self.b_cls)?;
                let prob = classify(&logit)?;
                let explanation = FusionExplanation {
                    modalities: self.modality_names.clone(),
                    weights: alphas.data().iter().map(|a| a.to_f64_lossy()).collect(),
                };
                Ok((prob, Some(explanation)))
            }
            FusionStrategy::Early => {
                let fused = early_fusion(&projected)?;
                let logit = fused.matmul(&self.w_cls)?.add(&self.b_cls)?;
                Ok((classify(&logit)?, None))
            }
            FusionStrategy::Late => {
                let probs: Vec<Tensor<S>> = projected
                    .iter()
                    .zip(&self.late_heads)
                    .map(|(p, (w, b))| classify(&p.matmul(w)?.add(b)?))
                    .collect::<Result<_>>()?;
                Ok((late_fusion(&probs)?, None))
            }
        }
    }
}
