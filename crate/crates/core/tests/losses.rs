mod common;

use common::{oracle_contrastive, random_contrastive_batch, to_array};
use ndarray::Array2;
use proptest::prelude::*;
use tgcl_core::losses::{supcon_loss, unsup_con_loss, ContrastiveBatch};

fn batch(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> ContrastiveBatch {
    ContrastiveBatch::new(to_array(rows), labels.to_vec(), tau).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(b.abs())
}

#[test]
fn random_batches_match_double_sum_oracle() {
    for seed in 0..100 {
        let n = 2 + (seed as usize % 7);
        let dim = 1 + (seed as usize % 8);
        let (rows, labels) = random_contrastive_batch(seed, n, dim, 3);
        let b = batch(&rows, &labels, 0.07);
        assert!(close(supcon_loss(&b), oracle_contrastive(&rows, &labels, 0.07, true), 1e-9));
        assert!(close(unsup_con_loss(&b), oracle_contrastive(&rows, &labels, 0.07, false), 1e-9));
    }
}

#[test]
fn two_samples_in_the_plane() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s], vec![-s, s]];
    let labels = [0, 1, 0, 1];
    let b = batch(&rows, &labels, 0.07);
    let want = oracle_contrastive(&rows, &labels, 0.07, true);
    assert!((supcon_loss(&b) - want).abs() < 1e-9);
    // With one label per sample the two forms coincide.
    assert_eq!(supcon_loss(&b), unsup_con_loss(&b));
}

#[test]
fn identical_embeddings_give_uniform_softmax() {
    let n = 3;
    let rows = vec![vec![0.6, 0.8]; 2 * n];
    let labels = [0, 1, 0, 0, 1, 0];
    let want = 2.0 * n as f64 * ((2 * n - 1) as f64).ln();
    assert!(close(supcon_loss(&batch(&rows, &labels, 0.07)), want, 1e-12));
}

#[test]
fn raising_a_positive_similarity_lowers_the_loss() {
    // Rows: a, b, a', b'. Moving a' toward a changes only sim(a, a').
    let mut last = f64::INFINITY;
    for step in 0..=20 {
        let theta = std::f64::consts::FRAC_PI_2 * (20 - step) as f64 / 20.0;
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![theta.cos(), theta.sin(), 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let loss = supcon_loss(&batch(&rows, &[0, 1, 0, 1], 0.07));
        assert!(loss.is_finite());
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
    }
}

#[test]
fn saturated_logits_stay_finite() {
    let mut rows = vec![vec![1.0, 0.0]; 4];
    rows.extend(vec![vec![-1.0, 0.0]; 4]);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    for tau in [0.07, 0.01, 1e-3] {
        let b = batch(&rows, &labels, tau);
        assert!(supcon_loss(&b).is_finite());
        assert!(unsup_con_loss(&b).is_finite());
    }
}

fn permuted(rows: &[Vec<f64>], labels: &[usize], perm: &[usize], swap_views: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = perm.len();
    let (first, second) = if swap_views { (n, 0) } else { (0, n) };
    let order: Vec<usize> = perm
        .iter()
        .map(|&i| first + i)
        .chain(perm.iter().map(|&i| second + i))
        .collect();
    (
        order.iter().map(|&i| rows[i].clone()).collect(),
        order.iter().map(|&i| labels[i]).collect(),
    )
}

proptest! {
    #[test]
    fn losses_ignore_sample_order(seed in any::<u64>(), n in 2usize..=8, dim in 1usize..=8, swap in any::<bool>(),
                                  perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (rows, labels) = random_contrastive_batch(seed, n, dim, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut tgcl_core::rng::stream(perm_seed, &[]));
        let (prow, plab) = permuted(&rows, &labels, &perm, swap);
        let (a, b) = (batch(&rows, &labels, 0.07), batch(&prow, &plab, 0.07));
        prop_assert!(close(supcon_loss(&a), supcon_loss(&b), 1e-12));
        prop_assert!(close(unsup_con_loss(&a), unsup_con_loss(&b), 1e-12));
    }

    #[test]
    fn unique_labels_reduce_exactly(seed in any::<u64>(), n in 2usize..=8, dim in 1usize..=8) {
        let (rows, _) = random_contrastive_batch(seed, n, dim, 1);
        let labels: Vec<usize> = (0..n).chain(0..n).collect();
        let b = batch(&rows, &labels, 0.07);
        prop_assert_eq!(supcon_loss(&b), unsup_con_loss(&b));
    }

    #[test]
    fn oracle_agreement(seed in any::<u64>(), n in 2usize..=8, dim in 1usize..=8, classes in 1usize..=4) {
        let (rows, labels) = random_contrastive_batch(seed, n, dim, classes);
        let b = batch(&rows, &labels, 0.07);
        prop_assert!(close(supcon_loss(&b), oracle_contrastive(&rows, &labels, 0.07, true), 1e-9));
        prop_assert!(close(unsup_con_loss(&b), oracle_contrastive(&rows, &labels, 0.07, false), 1e-9));
    }
}

#[test]
fn unnormalized_rows_are_rejected() {
    let z = Array2::from_elem((4, 2), 1.0);
    assert!(ContrastiveBatch::new(z, vec![0, 1, 0, 1], 0.07).is_err());
}
