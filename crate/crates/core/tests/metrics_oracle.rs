//! Metrics against a direct per-class reference.

use proalign::metrics::{balanced_accuracy, confusion_matrix, weighted_f1, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference(truth: &[usize], preds: &[usize], c: usize) -> (f64, f64) {
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut f1_sum = 0.0;
    for class in 0..c {
        let tp = truth.iter().zip(preds).filter(|&(&t, &p)| t == class && p == class).count() as f64;
        let support = truth.iter().filter(|&&t| t == class).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == class).count() as f64;
        if support == 0.0 {
            continue;
        }
        present += 1;
        let recall = tp / support;
        recall_sum += recall;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        f1_sum += support * f1;
    }
    (recall_sum / present as f64, f1_sum / truth.len() as f64)
}

#[test]
fn matches_reference_on_random_prediction_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let c = rng.random_range(2..=6);
        let n = rng.random_range(1..=80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        // bias towards the truth so scores span the whole range
        let hit = rng.random_range(0.0..1.0);
        let preds: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(hit) { t } else { rng.random_range(0..c) })
            .collect();
        let cm = confusion_matrix(&truth, &preds, c).unwrap();
        let (b, f) = reference(&truth, &preds, c);
        assert!((balanced_accuracy(&cm).unwrap() - b).abs() <= 1e-12);
        assert!((weighted_f1(&cm).unwrap() - f).abs() <= 1e-12);
    }
}

#[test]
fn hand_case() {
    let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![1, 2]]).unwrap();
    assert!((balanced_accuracy(&cm).unwrap() - 0.583_333_333_333_333_3).abs() <= 1e-12);
    assert!((weighted_f1(&cm).unwrap() - 0.6).abs() <= 1e-12);
}
