//! The full hybrid classifier: spatial attention encoder → temporal
//! state-space encoder → pooled gaze embedding concatenated with the
//! engineered features → multimodal fusion head → probability.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, FusionExplanation, FusionHead, FusionStrategy};
use crate::params::ParamSet;
use crate::rng::StreamKey;
use crate::scalar::Scalar;
use crate::ssm::{self, SsmConfig, SsmParams};
use crate::tensor::Tensor;
use crate::vit::{self, ViTConfig, ViTParams};

/// Per-forward mutable state: whether stochastic layers (dropout) are
/// active and the stream they draw from.
pub struct ForwardCtx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    /// Deterministic evaluation-mode context; the stream is never drawn
    /// from because dropout is an identity in eval mode.
    pub fn inference() -> Self {
        ForwardCtx {
            training: false,
            rng: StreamKey::root(0).rng(),
        }
    }

    pub fn training(rng: ChaCha8Rng) -> Self {
        ForwardCtx { training: true, rng }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub ssm: SsmConfig,
    /// Engineered gaze feature dimension appended to the pooled embedding.
    pub feature_dim: usize,
    pub speech_dim: usize,
    pub visual_dim: usize,
    pub d_fuse: usize,
    pub d_att: usize,
    pub strategy: FusionStrategy,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.ssm.d_model != self.vit.d_model {
            return Err(Error::Config(format!(
                "temporal d_model {} must match spatial d_model {}",
                self.ssm.d_model, self.vit.d_model
            )));
        }
        if self.speech_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("modality dims must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: ViTConfig::default(),
            ssm: SsmConfig::default(),
            feature_dim: 0,
            speech_dim: 8,
            visual_dim: 12,
            d_fuse: 32,
            d_att: 16,
            strategy: FusionStrategy::Hybrid,
        }
    }
}

/// One classification instance. `x` holds the fixation sequence as T×4
/// rows (x, y, duration in seconds, onset delta in seconds).
#[derive(Debug, Clone)]
pub struct Example<S: Scalar> {
    pub subject_id: String,
    pub x: Tensor<S>,
    /// 1×feature_dim engineered gaze features; 1×0-like empty handling is
    /// expressed as feature_dim = 0 and an absent tensor.
    pub engineered: Option<Tensor<S>>,
    pub f_s: Tensor<S>,
    pub f_v: Tensor<S>,
    pub label: u8,
}

pub struct ModelOutput<S: Scalar> {
    pub prob: Tensor<S>,
    pub explanation: Option<FusionExplanation>,
}

pub struct HybridModel<S: Scalar> {
    pub config: ModelConfig,
    pub vit: ViTParams<S>,
    pub ssm: SsmParams<S>,
    pub head: FusionHead<S>,
}

impl<S: Scalar> HybridModel<S> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vit = ViTParams::init(config.vit, rng)?;
        let ssm = SsmParams::init(config.ssm, rng)?;
        let gaze_dim = config.vit.d_model + config.feature_dim;
        let dims = vec![
            ("gaze".to_string(), gaze_dim),
            ("speech".to_string(), config.speech_dim),
            ("visual".to_string(), config.visual_dim),
        ];
        let head = FusionHead::init(config.strategy, &dims, config.d_fuse, config.d_att, rng)?;
        Ok(HybridModel {
            config,
            vit,
            ssm,
            head,
        })
    }

    pub fn params(&self) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        ps.extend("vit", self.vit.params());
        ps.extend("ssm", self.ssm.params());
        ps.extend("fusion", self.head.params());
        ps
    }

    pub fn forward(&self, ex: &Example<S>, ctx: &mut ForwardCtx) -> Result<ModelOutput<S>> {
        let h_vit = vit::encode(&ex.x, &self.vit, ctx)?;
        let h = ssm::encode_temporal(&h_vit, &self.ssm, ctx)?;
        let pooled = ssm::pool(&h);
        let gaze_row = match (&ex.engineered, self.config.feature_dim) {
            (Some(f), n) if f.cols() == n && n > 0 => {
                Tensor::concat_cols(&[pooled, f.clone()])?
            }
            (None, 0) => pooled,
            (f, n) => {
                return Err(Error::Usage(format!(
                    "example engineered features ({:?} cols) do not match model feature_dim {n}",
                    f.as_ref().map(|t| t.cols())
                )))
            }
        };
        let rows = vec![gaze_row, ex.f_s.clone(), ex.f_v.clone()];
        let (prob, explanation) = self.head.forward(&rows)?;
        Ok(ModelOutput { prob, explanation })
    }

    /// Forward plus loss for one labeled example.
    pub fn loss(&self, ex: &Example<S>, ctx: &mut ForwardCtx) -> Result<(Tensor<S>, Tensor<S>)> {
        let out = self.forward(ex, ctx)?;
        let loss = fusion::bce_loss(&out.prob, ex.label)?;
        Ok((loss, out.prob))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(strategy: FusionStrategy, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            vit: ViTConfig {
                window: 2,
                input_dim: 4,
                d_model: 8,
                heads: 2,
                layers: 1,
                mlp_ratio: 2,
                dropout: 0.0,
                max_patches: 16,
            },
            ssm: SsmConfig {
                d_model: 8,
                d_state: 4,
                blocks: 1,
            },
            feature_dim,
            speech_dim: 3,
            visual_dim: 5,
            d_fuse: 6,
            d_att: 4,
            strategy,
        }
    }

    fn tiny_example(feature_dim: usize, seed: u64) -> Example<f64> {
        let mut rng = StreamKey::root(seed).child("example").rng();
        Example {
            subject_id: "s0".into(),
            x: Tensor::randn(7, 4, 0.3, &mut rng).detach(),
            engineered: (feature_dim > 0)
                .then(|| Tensor::randn(1, feature_dim, 1.0, &mut rng).detach()),
            f_s: Tensor::randn(1, 3, 1.0, &mut rng).detach(),
            f_v: Tensor::randn(1, 5, 1.0, &mut rng).detach(),
            label: 1,
        }
    }

    #[test]
    fn forward_probability_in_unit_interval() {
        for strategy in [FusionStrategy::Hybrid, FusionStrategy::Early, FusionStrategy::Late] {
            let mut rng = StreamKey::root(1).child("init").rng();
            let model =
                HybridModel::<f64>::init(tiny_config(strategy, 10), &mut rng).unwrap();
            let ex = tiny_example(10, 2);
            let mut ctx = ForwardCtx::inference();
            let out = model.forward(&ex, &mut ctx).unwrap();
            let p = out.prob.item();
            assert!(p > 0.0 && p < 1.0, "{strategy:?} gave {p}");
            assert_eq!(out.explanation.is_some(), strategy == FusionStrategy::Hybrid);
        }
    }

    #[test]
    fn forward_deterministic_in_inference() {
        let mut rng = StreamKey::root(3).child("init").rng();
        let model = HybridModel::<f64>::init(tiny_config(FusionStrategy::Hybrid, 0), &mut rng)
            .unwrap();
        let ex = tiny_example(0, 4);
        let mut ctx = ForwardCtx::inference();
        let a = model.forward(&ex, &mut ctx).unwrap().prob.item();
        let b = model.forward(&ex, &mut ctx).unwrap().prob.item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn loss_backward_reaches_every_block() {
        let mut rng = StreamKey::root(5).child("init").rng();
        let model = HybridModel::<f64>::init(tiny_config(FusionStrategy::Hybrid, 4), &mut rng)
            .unwrap();
        let ex = tiny_example(4, 6);
        let mut ctx = ForwardCtx::inference();
        let (loss, _) = model.loss(&ex, &mut ctx).unwrap();
        loss.backward().unwrap();
        let ps = model.params();
        for prefix in ["vit.e_proj", "ssm.block0.b_mat", "fusion.att.w", "fusion.cls.w"] {
            let t = ps.get(prefix).unwrap_or_else(|| panic!("missing {prefix}"));
            let g = t.grad().unwrap_or_default();
            assert!(
                g.iter().any(|v| *v != 0.0),
                "no gradient reached {prefix}"
            );
        }
    }

    #[test]
    fn mismatched_feature_dim_rejected() {
        let mut rng = StreamKey::root(7).child("init").rng();
        let model = HybridModel::<f64>::init(tiny_config(FusionStrategy::Hybrid, 4), &mut rng)
            .unwrap();
        let mut ex = tiny_example(4, 8);
        ex.engineered = None;
        let mut ctx = ForwardCtx::inference();
        assert!(model.forward(&ex, &mut ctx).is_err());
    }

    #[test]
    fn mismatched_dims_rejected_at_init() {
        let mut config = tiny_config(FusionStrategy::Hybrid, 0);
        config.ssm.d_model = 6;
        let mut rng = StreamKey::root(9).rng();
        assert!(HybridModel::<f64>::init(config, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_initialization() {
        let a = HybridModel::<f64>::init(
            tiny_config(FusionStrategy::Hybrid, 2),
            &mut StreamKey::root(11).rng(),
        )
        .unwrap();
        let b = HybridModel::<f64>::init(
            tiny_config(FusionStrategy::Hybrid, 2),
            &mut StreamKey::root(11).rng(),
        )
        .unwrap();
        let pa = a.params();
        let pb = b.params();
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }
}
