//! Subject-level splitting, dataset assembly from a cohort, and the
//! mini-batch training loop with early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureConfig};
use crate::gaze::Cohort;
use crate::model::{Example, ForwardCtx, HybridModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

pub const MS_PER_S: f64 = 1000.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.val, self.test] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("split fractions must lie in [0, 1]".into()));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `n` items across the three splits.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // hand out the leftover seats by descending fractional remainder,
    // ties broken by split order (train, val, test)
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Subject-level stratified split: every scanpath of a subject lands in
/// exactly one split, and each class is apportioned independently so the
/// splits preserve the class balance. Deterministic under the key.
pub fn split_subjects(
    subjects: &[(String, u8)],
    config: &SplitConfig,
    key: &StreamKey,
) -> Result<SubjectSplit> {
    config.validate()?;
    let ids: BTreeSet<&str> = subjects.iter().map(|(s, _)| s.as_str()).collect();
    if ids.len() != subjects.len() {
        return Err(Error::Config("duplicate subject ids in split input".into()));
    }
    let mut split = SubjectSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut members: Vec<&String> = subjects
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(s, _)| s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = key.child("split").child_idx(class as u64).rng();
        members.shuffle(&mut rng);
        let [n_train, n_val, n_test] = apportion(members.len(), [config.train, config.val, config.test]);
        split.train.extend(members[..n_train].iter().map(|s| s.to_string()));
        split
            .val
            .extend(members[n_train..n_train + n_val].iter().map(|s| s.to_string()));
        split
            .test
            .extend(members[n_train + n_val..n_train + n_val + n_test].iter().map(|s| s.to_string()));
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Config(format!(
            "too few subjects ({}) to populate train/val/test at {:?}",
            subjects.len(),
            (config.train, config.val, config.test)
        )));
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

/// Turn every scanpath of the cohort into a model example. Fixation rows
/// carry (x, y, duration s, onset delta s); engineered features are
/// attached when a feature config is supplied.
pub fn build_examples(
    cohort: &Cohort,
    features: Option<&FeatureConfig>,
) -> Result<Vec<Example<f64>>> {
    let mut out = Vec::with_capacity(cohort.scanpaths.len());
    for path in &cohort.scanpaths {
        let n = path.fixations.len();
        if n == 0 {
            return Err(Error::InsufficientData("scanpath with no fixations".into()));
        }
        let mut rows = Vec::with_capacity(n * 4);
        let mut prev_onset = path.fixations[0].onset_ms;
        for f in &path.fixations {
            rows.extend([
                f.x,
                f.y,
                f.duration_ms / MS_PER_S,
                (f.onset_ms - prev_onset) / MS_PER_S,
            ]);
            prev_onset = f.onset_ms;
        }
        let engineered = match features {
            Some(config) => {
                let vals = assemble_features(path, config)?;
                Some(Tensor::new(1, vals.len(), vals)?.detach())
            }
            None => None,
        };
        let m = cohort
            .modalities
            .get(&path.subject_id)
            .ok_or_else(|| Error::Config(format!("no modalities for {}", path.subject_id)))?;
        out.push(Example {
            subject_id: path.subject_id.clone(),
            x: Tensor::new(n, 4, rows)?,
            engineered,
            f_s: Tensor::new(1, m.f_s.len(), m.f_s.clone())?,
            f_v: Tensor::new(1, m.f_v.len(), m.f_v.clone())?,
            label: path.label,
        });
    }
    Ok(out)
}

/// Examples whose subject belongs to `ids`, preserving order.
pub fn select_examples<'a>(examples: &'a [Example<f64>], ids: &[String]) -> Vec<&'a Example<f64>> {
    let set: BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    examples
        .iter()
        .filter(|e| set.contains(e.subject_id.as_str()))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            patience: 20,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn eval_split(model: &HybridModel<f64>, examples: &[&Example<f64>]) -> Result<(f64, f64)> {
    let mut ctx = ForwardCtx::inference();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let (loss, prob) = model.loss(ex, &mut ctx)?;
        loss_sum += loss.item();
        if (prob.item() >= 0.5) == (ex.label == 1) {
            correct += 1;
        }
    }
    Ok((
        loss_sum / examples.len() as f64,
        correct as f64 / examples.len() as f64,
    ))
}

/// Mini-batch training with per-epoch reshuffling, early stopping on
/// validation loss, and restoration of the best-validation weights.
/// A non-finite training loss aborts with the failing epoch attached.
pub fn train(
    model: &HybridModel<f64>,
    train_set: &[&Example<f64>],
    val_set: &[&Example<f64>],
    config: &TrainConfig,
    key: &StreamKey,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientData("empty train or validation set".into()));
    }
    let params = model.params();
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let mut history = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = params.snapshot();
    let mut stopped_early = false;

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let epoch_key = key.child("epoch").child_idx(epoch as u64);
        indices.shuffle(&mut epoch_key.child("shuffle").rng());
        let mut ctx = ForwardCtx::training(epoch_key.child("dropout").rng());

        let mut loss_sum = 0.0;
        for batch in indices.chunks(config.batch_size) {
            params.zero_grad();
            let mut batch_loss: Option<Tensor<f64>> = None;
            for &i in batch {
                let (loss, _) = model.loss(train_set[i], &mut ctx)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let batch_loss = batch_loss.unwrap().scale(1.0 / batch.len() as f64);
            let value = batch_loss.item();
            if !value.is_finite() {
                return Err(Error::Overflow {
                    what: "training loss".into(),
                    step: epoch,
                });
            }
            loss_sum += value * batch.len() as f64;
            batch_loss.backward()?;
            optimizer.step(&params)?;
        }

        let (val_loss, val_acc) = eval_split(model, val_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_acc,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_snapshot = params.snapshot();
        } else if epoch - best_epoch >= config.patience {
            stopped_early = true;
            break;
        }
    }
    params.restore(&best_snapshot);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionStrategy;
    use crate::gaze::{generate_cohort, CohortConfig};
    use crate::model::ModelConfig;
    use crate::ssm::SsmConfig;
    use crate::vit::ViTConfig;

    fn tiny_cohort(subjects_per_class: usize, gap: f64) -> Cohort {
        let config = CohortConfig {
            subjects_per_class,
            stimuli_per_subject: 2,
            fixations_min: 6,
            fixations_max: 9,
            class_gap: gap,
            speech_dim: 4,
            visual_dim: 5,
        };
        generate_cohort(&config, &StreamKey::root(21)).unwrap()
    }

    fn tiny_model(feature_dim: usize) -> HybridModel<f64> {
        let config = ModelConfig {
            vit: ViTConfig {
                window: 3,
                input_dim: 4,
                d_model: 8,
                heads: 2,
                layers: 1,
                mlp_ratio: 2,
                dropout: 0.1,
                max_patches: 8,
            },
            ssm: SsmConfig {
                d_model: 8,
                d_state: 4,
                blocks: 1,
            },
            feature_dim,
            speech_dim: 4,
            visual_dim: 5,
            d_fuse: 8,
            d_att: 6,
            strategy: FusionStrategy::Hybrid,
        };
        HybridModel::init(config, &mut StreamKey::root(22).child("model").rng()).unwrap()
    }

    #[test]
    fn apportion_preserves_total_and_matches_hand_case() {
        assert_eq!(apportion(20, [0.70, 0.15, 0.15]), [14, 3, 3]);
        assert_eq!(apportion(10, [0.70, 0.15, 0.15]), [7, 2, 1]);
        for n in 0..50 {
            let parts = apportion(n, [0.70, 0.15, 0.15]);
            assert_eq!(parts.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let subjects: Vec<(String, u8)> = (0..40)
            .map(|i| (format!("s{i:02}"), (i % 2) as u8))
            .collect();
        let split = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(5)).unwrap();
        assert_eq!(split.train.len(), 28);
        assert_eq!(split.val.len(), 6);
        assert_eq!(split.test.len(), 6);
        let all: BTreeSet<&String> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .collect();
        assert_eq!(all.len(), 40);
        // stratification: each split half odd-indexed (label 1)
        for part in [&split.train, &split.val, &split.test] {
            let ones = part
                .iter()
                .filter(|s| s[1..].parse::<usize>().unwrap() % 2 == 1)
                .count();
            assert_eq!(ones * 2, part.len());
        }
    }

    #[test]
    fn split_deterministic_and_seed_sensitive() {
        let subjects: Vec<(String, u8)> = (0..30)
            .map(|i| (format!("s{i:02}"), (i % 2) as u8))
            .collect();
        let a = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(1)).unwrap();
        let b = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(1)).unwrap();
        let c = split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_subjects_is_config_error() {
        let subjects = vec![("a".to_string(), 0), ("b".to_string(), 1)];
        assert!(matches!(
            split_subjects(&subjects, &SplitConfig::default(), &StreamKey::root(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_fractions_rejected() {
        let bad = SplitConfig {
            train: 0.9,
            val: 0.2,
            test: 0.1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn examples_carry_sequence_and_modalities() {
        let cohort = tiny_cohort(2, 0.5);
        let features = FeatureConfig::default();
        let examples = build_examples(&cohort, Some(&features)).unwrap();
        assert_eq!(examples.len(), cohort.scanpaths.len());
        for (ex, path) in examples.iter().zip(&cohort.scanpaths) {
            assert_eq!(ex.x.shape(), (path.fixations.len(), 4));
            // first onset delta is zero, the rest are strictly positive
            assert_eq!(ex.x.get(0, 3), 0.0);
            for t in 1..path.fixations.len() {
                assert!(ex.x.get(t, 3) > 0.0);
            }
            assert_eq!(
                ex.engineered.as_ref().unwrap().cols(),
                features.feature_len()
            );
            assert_eq!(ex.label, path.label);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_cohort() {
        let cohort = tiny_cohort(6, 0.9);
        let examples = build_examples(&cohort, None).unwrap();
        let split = split_subjects(
            &cohort.subjects,
            &SplitConfig::default(),
            &StreamKey::root(23),
        )
        .unwrap();
        let train_set = select_examples(&examples, &split.train);
        let val_set = select_examples(&examples, &split.val);
        let model = tiny_model(0);
        let config = TrainConfig {
            epochs: 15,
            batch_size: 8,
            patience: 20,
            ..TrainConfig::default()
        };
        let outcome = train(&model, &train_set, &val_set, &config, &StreamKey::root(24)).unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cohort = tiny_cohort(7, 0.8);
        let examples = build_examples(&cohort, None).unwrap();
        let split = split_subjects(
            &cohort.subjects,
            &SplitConfig::default(),
            &StreamKey::root(31),
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let model = tiny_model(0);
            let outcome = train(
                &model,
                &select_examples(&examples, &split.train),
                &select_examples(&examples, &split.val),
                &config,
                &StreamKey::root(32),
            )
            .unwrap();
            let bits: Vec<u64> = model
                .params()
                .snapshot()
                .iter()
                .flatten()
                .map(|v| v.to_bits())
                .collect();
            (outcome.history, bits)
        };
        let (h1, b1) = run();
        let (h2, b2) = run();
        assert_eq!(b1, b2);
        for (r1, r2) in h1.iter().zip(&h2) {
            assert_eq!(r1.train_loss.to_bits(), r2.train_loss.to_bits());
            assert_eq!(r1.val_loss.to_bits(), r2.val_loss.to_bits());
        }
    }

    #[test]
    fn early_stopping_restores_best_weights() {
        let cohort = tiny_cohort(7, 0.6);
        let examples = build_examples(&cohort, None).unwrap();
        let split = split_subjects(
            &cohort.subjects,
            &SplitConfig::default(),
            &StreamKey::root(41),
        )
        .unwrap();
        let model = tiny_model(0);
        let config = TrainConfig {
            epochs: 30,
            batch_size: 4,
            patience: 3,
            ..TrainConfig::default()
        };
        let outcome = train(
            &model,
            &select_examples(&examples, &split.train),
            &select_examples(&examples, &split.val),
            &config,
            &StreamKey::root(42),
        )
        .unwrap();
        // restored weights reproduce the best recorded validation loss
        let val_set = select_examples(&examples, &split.val);
        let (val_loss, _) = eval_split(&model, &val_set).unwrap();
        assert!((val_loss - outcome.best_val_loss).abs() < 1e-12);
        assert_eq!(
            outcome.best_val_loss,
            outcome
                .history
                .iter()
                .map(|r| r.val_loss)
                .fold(f64::INFINITY, f64::min)
        );
    }
}
