//! Property-based invariants across the numeric core and the gaze
//! feature pipeline.

use gazefusion::features::{transition_matrix, FeatureConfig, RegionGrid, UnvisitedRowPolicy};
use gazefusion::gaze::{Fixation, ScanPath, StimulusCategory};
use gazefusion::ssm::ssm_scan_parallel;
use gazefusion::tensor::Tensor;
use gazefusion::StreamKey;
use proptest::prelude::*;

type T = Tensor<f64>;

fn scanpath(points: Vec<(f64, f64, f64)>) -> ScanPath {
    let mut onset = 0.0;
    let fixations = points
        .into_iter()
        .map(|(x, y, d)| {
            let f = Fixation {
                x,
                y,
                duration_ms: d,
                onset_ms: onset,
            };
            onset += d + 30.0;
            f
        })
        .collect();
    ScanPath {
        subject_id: "s".into(),
        stimulus_id: "i".into(),
        category: StimulusCategory::SinglePerson,
        fixations,
        label: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = StreamKey::root(seed).child("softmax").rng();
        let x = T::randn(rows, cols, 5.0, &mut rng).detach();
        let s = x.softmax_rows();
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let v = s.get(i, j);
                prop_assert!(v >= 0.0 && v <= 1.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn transition_rows_stochastic_under_uniform_policy(
        points in prop::collection::vec(
            (0.0f64..=1.0, 0.0f64..=1.0, 50.0f64..400.0), 2..40),
        grid_rows in 1usize..5,
        grid_cols in 1usize..5,
    ) {
        let path = scanpath(points);
        let grid = RegionGrid::new(grid_rows, grid_cols).unwrap();
        let tm = transition_matrix(&path, &grid, UnvisitedRowPolicy::Uniform).unwrap();
        let r = tm.regions;
        for i in 0..r {
            let sum: f64 = tm.probs[i * r..(i + 1) * r].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn transition_rows_zero_or_stochastic_under_flag_policy(
        points in prop::collection::vec(
            (0.0f64..=1.0, 0.0f64..=1.0, 50.0f64..400.0), 2..40),
    ) {
        let path = scanpath(points);
        let grid = RegionGrid::default();
        let tm = transition_matrix(&path, &grid, UnvisitedRowPolicy::ZeroWithFlag).unwrap();
        let r = tm.regions;
        for i in 0..r {
            let sum: f64 = tm.probs[i * r..(i + 1) * r].iter().sum();
            if tm.unvisited[i] {
                prop_assert_eq!(sum, 0.0);
            } else {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn assembled_features_are_finite_and_sized(
        points in prop::collection::vec(
            (0.0f64..=1.0, 0.0f64..=1.0, 50.0f64..400.0), 2..40),
        include_temporal in any::<bool>(),
    ) {
        let path = scanpath(points);
        let config = FeatureConfig {
            include_temporal,
            ..FeatureConfig::default()
        };
        let vals = gazefusion::features::assemble_features(&path, &config).unwrap();
        prop_assert_eq!(vals.len(), config.feature_len());
        prop_assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parallel_scan_matches_sequential(
        seq in 1usize..80,
        ch in 1usize..4,
        dstate in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = StreamKey::root(seed).child("scan").rng();
        let a = T::new(ch, dstate, T::randn(ch, dstate, 1.0, &mut rng).sigmoid().data()).unwrap();
        let b = T::randn(ch, dstate, 0.5, &mut rng).detach();
        let c = T::randn(ch, dstate, 0.5, &mut rng).detach();
        let d = T::randn(1, ch, 0.5, &mut rng).detach();
        let x = T::randn(seq, ch, 1.0, &mut rng).detach();
        let seq_y = T::ssm_scan(&a, &b, &c, &d, &x).unwrap();
        let (par_y, _) = ssm_scan_parallel(&a, &b, &c, &d, &x).unwrap();
        for (u, v) in seq_y.data().iter().zip(par_y.data()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn roc_auc_in_unit_interval_and_matches_oracle(
        scores in prop::collection::vec(0u8..30, 4..60),
    ) {
        let n = scores.len();
        let scores: Vec<f64> = scores.into_iter().map(|v| v as f64 / 30.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let roc = gazefusion::eval::roc_curve(&scores, &labels).unwrap();
        let mw = gazefusion::eval::mann_whitney_auc(&scores, &labels).unwrap();
        prop_assert!(roc.auc >= 0.0 && roc.auc <= 1.0);
        prop_assert!((roc.auc - mw).abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_naive_oracle(
        n in 1usize..5,
        k in 1usize..5,
        m in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = StreamKey::root(seed).child("matmul").rng();
        let a = T::randn(n, k, 1.0, &mut rng).detach();
        let b = T::randn(k, m, 1.0, &mut rng).detach();
        let c = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let expect: f64 = (0..k).map(|p| a.get(i, p) * b.get(p, j)).sum();
                prop_assert!((c.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}
