//! Metric oracles: a quadratic reference implementation for the rank
//! correlation, hand-computed geometry for the distance features, and
//! property tests for the run statistics and disparity reports.

use amplab_core::data::{gen_blobs_task, TaskSpec};
use amplab_core::metrics::{
    cosine_distance_class_means, kendall_tau, pairwise_difficulty_matrix, rank_transform,
    DisparityReport, RunStats, DISPARITY_DEGENERACY_THRESHOLD,
};
use amplab_core::nn::{init_mlp, Activation, MlpSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tie-corrected rank correlation by direct enumeration of all pairs.
fn brute_force_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tied_a, mut tied_b) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let ta = a[i] == a[j];
            let tb = b[i] == b[j];
            if ta {
                tied_a += 1;
            }
            if tb {
                tied_b += 1;
            }
            if !ta && !tb {
                if (a[i] < a[j]) == (b[i] < b[j]) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    let denom = ((n0 - tied_a) as f64 * (n0 - tied_b) as f64).sqrt();
    ((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0)
}

#[test]
fn rank_correlation_matches_the_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a0);
    for trial in 0..100 {
        let n = 2 + trial % 38;
        // Half the trials use coarsely quantized values to force ties.
        let quantize = trial % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if quantize {
                (v * 5.0).round() / 5.0
            } else {
                v
            }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if a.windows(2).all(|w| w[0] == w[1]) || b.windows(2).all(|w| w[0] == w[1]) {
            assert!(kendall_tau(&a, &b).is_err(), "constant input must error");
            continue;
        }
        let fast = kendall_tau(&a, &b).unwrap();
        let slow = brute_force_tau_b(&a, &b);
        assert!(
            (fast - slow).abs() < 1e-12,
            "trial {trial} (n = {n}): {fast} vs oracle {slow}"
        );
    }
}

#[test]
fn rank_correlation_endpoints() {
    let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let cubed: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
    assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
    assert_eq!(kendall_tau(&x, &neg).unwrap(), -1.0);
    // Invariant under strictly monotone transforms.
    assert_eq!(kendall_tau(&x, &cubed).unwrap(), 1.0);
}

#[test]
fn class_mean_distance_matches_hand_computation() {
    let ds = gen_blobs_task(60, 3, 0.5, 0.0, 9).unwrap();
    for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let mut means = [vec![0.0; ds.feature_dim], vec![0.0; ds.feature_dim]];
        let mut counts = [0usize; 2];
        for row in 0..ds.n() {
            let slot = if ds.labels[row] == i {
                0
            } else if ds.labels[row] == j {
                1
            } else {
                continue;
            };
            for (m, &x) in means[slot].iter_mut().zip(ds.feature_row(row)) {
                *m += x;
            }
            counts[slot] += 1;
        }
        for slot in 0..2 {
            for m in means[slot].iter_mut() {
                *m /= counts[slot] as f64;
            }
        }
        let dot: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| a * b).sum();
        let na: f64 = means[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = means[1].iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = 1.0 - dot / (na * nb);
        let got = cosine_distance_class_means(&ds, i, j).unwrap();
        assert!(
            (got - expect).abs() < 1e-12,
            "classes ({i},{j}): {got} vs hand-computed {expect}"
        );
    }
}

#[test]
fn difficulty_matrix_is_symmetric_with_unit_diagonal() {
    let ds = TaskSpec {
        generator: "blobs".to_string(),
        n: 40,
        num_classes: 4,
        spread: 0.4,
        seed: 3,
        ..TaskSpec::default()
    }
    .generate()
    .unwrap();
    let spec = MlpSpec {
        input_dim: ds.feature_dim,
        hidden_widths: vec![6],
        output_dim: 4,
        activation: Activation::Tanh,
        input_batchnorm: false,
    };
    let mlp = init_mlp(&spec, 2).unwrap();
    let m = pairwise_difficulty_matrix(&mlp, &ds).unwrap();
    assert_eq!(m.len(), 4);
    for i in 0..4 {
        assert_eq!(m[i][i], 1.0);
        for j in 0..4 {
            assert!((0.0..=1.0).contains(&m[i][j]), "({i},{j}) = {}", m[i][j]);
            assert_eq!(m[i][j], m[j][i], "asymmetry at ({i},{j})");
        }
    }
}

proptest! {
    /// Ranks are a permutation-respecting relabeling: they sum to
    /// n(n+1)/2, tied inputs share a rank, and strict order is preserved.
    #[test]
    fn rank_transform_properties(values in prop::collection::vec(-100..100i32, 2..25)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64 / 4.0).collect();
        let ranks = rank_transform(&v);
        let n = v.len() as f64;
        let sum: f64 = ranks.iter().sum();
        prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            prop_assert!(ranks[i] >= 1.0 && ranks[i] <= n);
            for j in 0..v.len() {
                if v[i] == v[j] {
                    prop_assert_eq!(ranks[i], ranks[j]);
                } else if v[i] < v[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                }
            }
        }
    }

    /// The standard error is the sample standard deviation over sqrt(n),
    /// absent for single runs.
    #[test]
    fn run_stats_standard_error_formula(runs in prop::collection::vec(-1.0..1.0f64, 1..12)) {
        let stats = RunStats::from_runs(runs.clone()).unwrap();
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        prop_assert!((stats.mean - mean).abs() < 1e-12);
        if runs.len() == 1 {
            prop_assert!(stats.se.is_none());
        } else {
            let var = runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            prop_assert!((stats.se.unwrap() - (var / n).sqrt()).abs() < 1e-12);
        }
    }

    /// Disparities are mean paired differences; swapping the groups negates
    /// them, preserves the amplification flag, and is an involution.
    #[test]
    fn disparity_report_swap_properties(
        base in prop::collection::vec(0.0..1.0f64, 5),
        deltas in prop::collection::vec(-0.2..0.2f64, 15),
        n in 3..=5usize,
    ) {
        let a_iso: Vec<f64> = base[..n].to_vec();
        let shifted = |offset: usize| -> Vec<f64> {
            a_iso.iter()
                .zip(&deltas[offset..offset + n])
                .map(|(v, d)| (v + d).clamp(0.0, 1.0))
                .collect()
        };
        let b_iso = shifted(0);
        let a_comb = shifted(5);
        let b_comb = shifted(10);
        let report = DisparityReport::from_runs(
            "a", "b",
            RunStats::from_runs(a_iso.clone()).unwrap(),
            RunStats::from_runs(b_iso.clone()).unwrap(),
            RunStats::from_runs(a_comb.clone()).unwrap(),
            RunStats::from_runs(b_comb.clone()).unwrap(),
        ).unwrap();
        let d_tilde: f64 = a_iso.iter().zip(&b_iso).map(|(a, b)| a - b).sum::<f64>() / n as f64;
        let d: f64 = a_comb.iter().zip(&b_comb).map(|(a, b)| a - b).sum::<f64>() / n as f64;
        prop_assert!((report.d_tilde - d_tilde).abs() < 1e-12);
        prop_assert!((report.d - d).abs() < 1e-12);
        match report.k_ratio {
            Some(k) => {
                prop_assert!(report.d_tilde.abs() >= DISPARITY_DEGENERACY_THRESHOLD);
                prop_assert!((k - report.d / report.d_tilde).abs() < 1e-12);
            }
            None => prop_assert!(report.d_tilde.abs() < DISPARITY_DEGENERACY_THRESHOLD),
        }
        let swapped = report.swapped();
        prop_assert_eq!(swapped.d_tilde, -report.d_tilde);
        prop_assert_eq!(swapped.d, -report.d);
        prop_assert_eq!(swapped.amplified, report.amplified);
        prop_assert_eq!(&swapped.group_a, "b");
        prop_assert_eq!(swapped.acc_a_iso.clone(), report.acc_b_iso.clone());
        prop_assert_eq!(swapped.swapped(), report);
    }
}
