//! Ablation sweep: every fusion strategy crossed with the temporal
//! feature toggle, trained and evaluated on one shared subject split.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::evaluate;
use crate::features::FeatureConfig;
use crate::fusion::FusionStrategy;
use crate::gaze::Cohort;
use crate::model::{HybridModel, ModelConfig};
use crate::rng::StreamKey;
use crate::train::{
    build_examples, select_examples, split_subjects, train, SplitConfig, TrainConfig,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub strategy: FusionStrategy,
    pub include_temporal: bool,
}

/// The full 3×2 grid, in a fixed order.
pub fn standard_arms() -> Vec<AblationArm> {
    let mut arms = Vec::new();
    for strategy in [FusionStrategy::Hybrid, FusionStrategy::Early, FusionStrategy::Late] {
        for include_temporal in [true, false] {
            let suffix = if include_temporal { "temporal" } else { "base" };
            arms.push(AblationArm {
                name: format!("{}_{suffix}", strategy.name()),
                strategy,
                include_temporal,
            });
        }
    }
    arms
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: AblationArm,
    /// "ok" or the error message; a failed arm never aborts the sweep.
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// FNV-1a hash of the split membership, for cross-run comparison.
    pub split_hash: u64,
    pub arms: Vec<ArmResult>,
}

/// FNV-1a over the canonical split listing.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn split_hash(split: &crate::train::SubjectSplit) -> u64 {
    let mut listing = String::new();
    for (part, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for id in ids {
            listing.push_str(part);
            listing.push(':');
            listing.push_str(id);
            listing.push('\n');
        }
    }
    fnv1a(listing.as_bytes())
}

/// Run every arm against the same cohort, split, and training budget.
/// `base_model` supplies the shared encoder dimensions; each arm swaps
/// in its own strategy and feature dimension.
pub fn run_ablation(
    cohort: &Cohort,
    base_model: &ModelConfig,
    base_features: &FeatureConfig,
    train_config: &TrainConfig,
    split_config: &SplitConfig,
    key: &StreamKey,
) -> Result<AblationReport> {
    let split = split_subjects(&cohort.subjects, split_config, &key.child("split"))?;
    let hash = split_hash(&split);
    let mut results = Vec::new();
    for arm in standard_arms() {
        let status = run_arm(cohort, base_model, base_features, train_config, &split, key, &arm);
        results.push(match status {
            Ok(r) => r,
            Err(e) => ArmResult {
                arm,
                status: e.to_string(),
                test_accuracy: None,
                test_auc: None,
                best_epoch: None,
                epochs_run: None,
            },
        });
    }
    Ok(AblationReport {
        split_hash: hash,
        arms: results,
    })
}

fn run_arm(
    cohort: &Cohort,
    base_model: &ModelConfig,
    base_features: &FeatureConfig,
    train_config: &TrainConfig,
    split: &crate::train::SubjectSplit,
    key: &StreamKey,
    arm: &AblationArm,
) -> Result<ArmResult> {
    let features = FeatureConfig {
        include_temporal: arm.include_temporal,
        ..base_features.clone()
    };
    let mut model_config = base_model.clone();
    model_config.strategy = arm.strategy;
    model_config.feature_dim = features.feature_len();

    let examples = build_examples(cohort, Some(&features))?;
    let train_set = select_examples(&examples, &split.train);
    let val_set = select_examples(&examples, &split.val);
    let test_set: Vec<_> = select_examples(&examples, &split.test)
        .into_iter()
        .cloned()
        .collect();

    let arm_key = key.child("arm").child(&arm.name);
    let model = HybridModel::init(model_config, &mut arm_key.child("init").rng())?;
    let outcome = train(&model, &train_set, &val_set, train_config, &arm_key.child("train"))?;
    let (report, _) = evaluate(&model, &test_set, 0.5)?;
    Ok(ArmResult {
        arm: arm.clone(),
        status: "ok".into(),
        test_accuracy: Some(report.metrics.accuracy),
        test_auc: report.auc,
        best_epoch: Some(outcome.best_epoch),
        epochs_run: Some(outcome.history.len()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn to_csv(report: &AblationReport) -> String {
    let mut out = String::from(
        "arm,strategy,temporal_features,status,test_accuracy,test_auc,best_epoch,epochs_run\n",
    );
    for r in &report.arms {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.arm.name,
            r.arm.strategy.name(),
            r.arm.include_temporal,
            r.status.replace(',', ";"),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.test_auc),
            r.best_epoch.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.epochs_run.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        ));
    }
    out
}

/// Human-readable aligned table.
pub fn to_text(report: &AblationReport) -> String {
    let mut out = format!("split hash: {:016x}\n", report.split_hash);
    out.push_str(&format!(
        "{:<18} {:>8} {:>9} {:>8} {:>10}  status\n",
        "arm", "accuracy", "auc", "best_ep", "epochs"
    ));
    for r in &report.arms {
        out.push_str(&format!(
            "{:<18} {:>8} {:>9} {:>8} {:>10}  {}\n",
            r.arm.name,
            fmt_opt(r.test_accuracy),
            fmt_opt(r.test_auc),
            r.best_epoch.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.epochs_run.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.status,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::{generate_cohort, CohortConfig};
    use crate::ssm::SsmConfig;
    use crate::vit::ViTConfig;

    fn tiny_setup() -> (Cohort, ModelConfig, FeatureConfig, TrainConfig) {
        let cohort = generate_cohort(
            &CohortConfig {
                subjects_per_class: 5,
                stimuli_per_subject: 1,
                fixations_min: 6,
                fixations_max: 8,
                class_gap: 0.8,
                speech_dim: 4,
                visual_dim: 5,
            },
            &StreamKey::root(50),
        )
        .unwrap();
        let model = ModelConfig {
            vit: ViTConfig {
                window: 3,
                input_dim: 4,
                d_model: 8,
                heads: 2,
                layers: 1,
                mlp_ratio: 2,
                dropout: 0.0,
                max_patches: 8,
            },
            ssm: SsmConfig {
                d_model: 8,
                d_state: 4,
                blocks: 1,
            },
            feature_dim: 0,
            speech_dim: 4,
            visual_dim: 5,
            d_fuse: 8,
            d_att: 6,
            strategy: FusionStrategy::Hybrid,
        };
        let features = FeatureConfig::default();
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (cohort, model, features, train)
    }

    #[test]
    fn standard_grid_has_six_unique_arms() {
        let arms = standard_arms();
        assert_eq!(arms.len(), 6);
        let names: std::collections::BTreeSet<_> = arms.iter().map(|a| &a.name).collect();
        assert_eq!(names.len(), 6);
    }

    #[test]
    fn sweep_runs_all_arms_and_reproduces() {
        let (cohort, model, features, train) = tiny_setup();
        let run = || {
            run_ablation(
                &cohort,
                &model,
                &features,
                &train,
                &SplitConfig::default(),
                &StreamKey::root(51),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.arms.len(), 6);
        for (x, y) in a.arms.iter().zip(&b.arms) {
            assert_eq!(x.status, "ok");
            assert_eq!(
                x.test_accuracy.unwrap().to_bits(),
                y.test_accuracy.unwrap().to_bits()
            );
        }
        assert_eq!(a.split_hash, b.split_hash);
    }

    #[test]
    fn csv_and_text_cover_every_arm() {
        let (cohort, model, features, train) = tiny_setup();
        let report = run_ablation(
            &cohort,
            &model,
            &features,
            &train,
            &SplitConfig::default(),
            &StreamKey::root(52),
        )
        .unwrap();
        let csv = to_csv(&report);
        assert_eq!(csv.lines().count(), 7);
        let text = to_text(&report);
        for arm in standard_arms() {
            assert!(csv.contains(&arm.name));
            assert!(text.contains(&arm.name));
        }
    }

    #[test]
    fn split_hash_tracks_membership() {
        let subjects: Vec<(String, u8)> = (0..20)
            .map(|i| (format!("s{i:02}"), (i % 2) as u8))
            .collect();
        let a = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(1)).unwrap();
        let b = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(2)).unwrap();
        assert_eq!(split_hash(&a), split_hash(&a));
        assert_ne!(split_hash(&a), split_hash(&b));
    }
}
