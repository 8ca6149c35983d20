//! Probe training behaviour on small synthetic problems.

use proalign::metrics::{balanced_accuracy, confusion_matrix};
use proalign::probe::{
    decode_model, encode_model, loss, predict, train_probe, LabeledSet, ProbeConfig, ProbeKind,
};
use proalign::EmbeddingMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blobs(seed: u64, n_per_class: usize, dim: usize, classes: usize) -> (EmbeddingMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|c| (0..dim).map(|k| if k % classes == c { 3.0 } else { 0.0 }).collect())
        .collect();
    let noise = Normal::new(0.0f32, 0.5).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * classes {
        let c = i % classes;
        rows.push(centers[c].iter().map(|&v| v + noise.sample(&mut rng)).collect::<Vec<f32>>());
        labels.push(c);
    }
    (EmbeddingMatrix::from_rows(&rows).unwrap(), labels)
}

fn score(model: &proalign::probe::ProbeModel, x: &EmbeddingMatrix, y: &[usize]) -> f64 {
    let preds = predict(model, x).unwrap();
    balanced_accuracy(&confusion_matrix(y, &preds, model.config.n_classes).unwrap()).unwrap()
}

#[test]
fn separable_blobs_are_learned() {
    let (x, y) = blobs(1, 40, 12, 3);
    let (xt, yt) = blobs(2, 40, 12, 3);
    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
        let mut cfg = ProbeConfig::new(kind, 12, 3);
        cfg.learning_rate = 1e-2;
        cfg.epochs = 30;
        cfg.hidden_dim = 16;
        let (model, log) = train_probe(LabeledSet::new(&x, &y).unwrap(), Some(LabeledSet::new(&xt, &yt).unwrap()), &cfg).unwrap();
        assert_eq!(log.epochs.len(), 30);
        assert!(log.best_epoch >= 1);
        assert!(score(&model, &xt, &yt) >= 0.95, "{kind:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let (x, y) = blobs(3, 10, 6, 2);
    let mut cfg = ProbeConfig::new(ProbeKind::Mlp, 6, 2);
    cfg.hidden_dim = 8;
    cfg.epochs = 5;
    let set = LabeledSet::new(&x, &y).unwrap();
    let (a, la) = train_probe(set, None, &cfg).unwrap();
    let (b, lb) = train_probe(set, None, &cfg).unwrap();
    assert_eq!(encode_model(&a), encode_model(&b));
    assert_eq!(la, lb);
    cfg.seed = 1;
    let (c, _) = train_probe(set, None, &cfg).unwrap();
    assert_ne!(encode_model(&a), encode_model(&c));
    assert_eq!(decode_model(&encode_model(&a)).unwrap(), a);
}

#[test]
fn loss_falls_over_long_training() {
    let (x, y) = blobs(4, 20, 8, 4);
    let mut cfg = ProbeConfig::new(ProbeKind::Linear, 8, 4);
    cfg.epochs = 200;
    let set = LabeledSet::new(&x, &y).unwrap();
    let (_, log) = train_probe(set, None, &cfg).unwrap();
    let first = log.epochs.first().unwrap().train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");

    let untrained = proalign::probe::init_probe(&cfg).unwrap();
    let batch: Vec<(&[f32], usize)> = x.iter_rows().zip(y.iter().copied()).collect();
    assert!(loss(&untrained, &batch).unwrap().is_finite());
}
