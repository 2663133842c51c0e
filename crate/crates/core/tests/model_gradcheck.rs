//! Finite-difference verification of the analytic gradients through each
//! architectural block and through the full model.

use gazefusion::fusion::{attention_fusion, bce_loss, classify, FusionStrategy};
use gazefusion::gradcheck::grad_check;
use gazefusion::model::{Example, ForwardCtx, HybridModel, ModelConfig};
use gazefusion::params::ParamSet;
use gazefusion::ssm::{SsmConfig, SsmParams};
use gazefusion::tensor::Tensor;
use gazefusion::vit::{self, ViTConfig, ViTParams};
use gazefusion::StreamKey;

type T = Tensor<f64>;

/// Re-draw every parameter at a larger scale. The training-time init is
/// deliberately small, which parks ReLU pre-activations within the
/// finite-difference step of the kink; checking at O(0.3) values keeps
/// central differences on one side of every kink while exercising the
/// same backward code.
fn randomize(ps: &ParamSet<f64>, std: f64, rng: &mut rand_chacha::ChaCha8Rng) {
    for (_, t) in ps.iter() {
        let fresh = T::randn(t.rows(), t.cols(), std, rng);
        t.set_data(&fresh.data());
    }
}

#[test]
fn vit_block_gradients() {
    let mut rng = StreamKey::root(60).child("gc-vit").rng();
    let config = ViTConfig {
        window: 2,
        input_dim: 3,
        d_model: 6,
        heads: 2,
        layers: 1,
        mlp_ratio: 2,
        dropout: 0.0,
        max_patches: 8,
    };
    let params = ViTParams::<f64>::init(config, &mut rng).unwrap();
    let x = T::randn(5, 3, 0.5, &mut rng).detach();
    let ps = params.params();
    randomize(&ps, 0.3, &mut rng);
    let report = grad_check(&ps, 1e-3, || {
        let mut ctx = ForwardCtx::inference();
        let h = vit::encode(&x, &params, &mut ctx)?;
        Ok(h.mul(&h)?.mean_all())
    })
    .unwrap();
    assert!(
        report.max_rel_error() < 1e-4,
        "vit max rel error {}",
        report.max_rel_error()
    );
}

#[test]
fn ssm_block_gradients() {
    let mut rng = StreamKey::root(61).child("gc-ssm").rng();
    let config = SsmConfig {
        d_model: 5,
        d_state: 3,
        blocks: 2,
    };
    let params = SsmParams::<f64>::init(config, &mut rng).unwrap();
    let x = T::randn(7, 5, 0.5, &mut rng).detach();
    let ps = params.params();
    randomize(&ps, 0.3, &mut rng);
    let report = grad_check(&ps, 1e-3, || {
        let mut ctx = ForwardCtx::inference();
        let h = gazefusion::ssm::encode_temporal(&x, &params, &mut ctx)?;
        Ok(h.mul(&h)?.mean_all())
    })
    .unwrap();
    assert!(
        report.max_rel_error() < 1e-4,
        "ssm max rel error {}",
        report.max_rel_error()
    );
}

#[test]
fn fusion_attention_gradients() {
    let mut rng = StreamKey::root(62).child("gc-fusion").rng();
    let stacked = T::randn(3, 4, 1.0, &mut rng).detach();
    let w = T::randn(4, 5, 0.5, &mut rng);
    let v = T::randn(5, 1, 0.5, &mut rng);
    let mut ps = ParamSet::new();
    ps.push("w_att", w.clone());
    ps.push("v_att", v.clone());
    let report = grad_check(&ps, 1e-3, || {
        let (fused, _) = attention_fusion(&stacked, &w, &v)?;
        Ok(fused.mul(&fused)?.mean_all())
    })
    .unwrap();
    assert!(
        report.max_rel_error() < 1e-4,
        "fusion max rel error {}",
        report.max_rel_error()
    );
}

#[test]
fn classifier_and_loss_gradients_linear_case() {
    // purely linear logit path: central differences should be near-exact
    let mut rng = StreamKey::root(63).child("gc-cls").rng();
    let x = T::randn(1, 4, 1.0, &mut rng).detach();
    let w = T::randn(4, 1, 0.5, &mut rng);
    let mut ps = ParamSet::new();
    ps.push("w", w.clone());
    let report = grad_check(&ps, 1e-3, || Ok(x.matmul(&w)?.mean_all())).unwrap();
    assert!(
        report.max_rel_error() < 1e-6,
        "linear max rel error {}",
        report.max_rel_error()
    );

    // sigmoid + bce on top stays within the general tolerance
    let report = grad_check(&ps, 1e-3, || {
        let p = classify(&x.matmul(&w)?)?;
        bce_loss(&p, 1)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4);
}

#[test]
fn full_model_gradients() {
    let config = ModelConfig {
        vit: ViTConfig {
            window: 2,
            input_dim: 4,
            d_model: 6,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            max_patches: 8,
        },
        ssm: SsmConfig {
            d_model: 6,
            d_state: 3,
            blocks: 1,
        },
        feature_dim: 3,
        speech_dim: 3,
        visual_dim: 4,
        d_fuse: 5,
        d_att: 4,
        strategy: FusionStrategy::Hybrid,
    };
    let mut rng = StreamKey::root(64).child("gc-model").rng();
    let model = HybridModel::<f64>::init(config, &mut rng).unwrap();
    let ex = Example {
        subject_id: "s".into(),
        x: T::randn(5, 4, 0.4, &mut rng).detach(),
        engineered: Some(T::randn(1, 3, 1.0, &mut rng).detach()),
        f_s: T::randn(1, 3, 1.0, &mut rng).detach(),
        f_v: T::randn(1, 4, 1.0, &mut rng).detach(),
        label: 1,
    };
    let ps = model.params();
    randomize(&ps, 0.3, &mut rng);
    let report = grad_check(&ps, 1e-3, || {
        let mut ctx = ForwardCtx::inference();
        let (loss, _) = model.loss(&ex, &mut ctx)?;
        Ok(loss)
    })
    .unwrap();
    for b in &report.blocks {
        assert!(b.max_rel_error < 1e-4, "{}: {}", b.name, b.max_rel_error);
    }
}
