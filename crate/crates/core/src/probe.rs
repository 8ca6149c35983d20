//! Downstream predictors trained on slide embeddings.
//!
//! A probe is either a single affine layer or a one-hidden-layer MLP with a
//! rectifier, trained with softmax cross-entropy and AdamW. Parameters and
//! optimizer moments are kept in `f64`.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax_first, EmbeddingMatrix};
use crate::metrics::{balanced_accuracy, confusion_matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// Defaults: lr 1e-4, weight decay 1e-5, 20 epochs, batch 8, hidden 256.
    pub fn new(kind: ProbeKind, input_dim: usize, n_classes: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim: 256,
            n_classes,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.kind == ProbeKind::Mlp && self.hidden_dim == 0 {
            return bad("MLP hidden_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// A named `rows x cols` parameter block (biases have `cols == 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Param {
    fn zeros(name: &'static str, rows: usize, cols: usize) -> Self {
        Self {
            name,
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }
}

/// Gradients in the same layout as [`ProbeModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    /// Linear: `[weight, bias]`. MLP: `[w1, b1, w2, b2]`.
    pub params: Vec<Param>,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

/// Glorot-uniform weights, zero biases, zero moments.
pub fn init_probe(cfg: &ProbeConfig) -> Result<ProbeModel> {
    cfg.validate()?;
    let shapes: Vec<(&'static str, usize, usize)> = match cfg.kind {
        ProbeKind::Linear => vec![("weight", cfg.n_classes, cfg.input_dim), ("bias", cfg.n_classes, 1)],
        ProbeKind::Mlp => vec![
            ("hidden.weight", cfg.hidden_dim, cfg.input_dim),
            ("hidden.bias", cfg.hidden_dim, 1),
            ("output.weight", cfg.n_classes, cfg.hidden_dim),
            ("output.bias", cfg.n_classes, 1),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params: Vec<Param> = shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let mut p = Param::zeros(name, rows, cols);
            if name.ends_with("weight") {
                let a = (6.0 / (cols + rows) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                p.values.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            p
        })
        .collect();
    let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    Ok(ProbeModel {
        config: cfg.clone(),
        params,
        first_moment: zeros.clone(),
        second_moment: zeros,
        step: 0,
    })
}

fn affine(weight: &Param, bias: &Param, x: &[f64]) -> Vec<f64> {
    weight
        .values
        .chunks_exact(weight.cols)
        .zip(&bias.values)
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

/// Softmax with the maximum logit subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

struct Activations {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl ProbeModel {
    pub fn kind(&self) -> ProbeKind {
        self.config.kind
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn activations(&self, x: &[f32]) -> Activations {
        let input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        match self.config.kind {
            ProbeKind::Linear => {
                let logits = affine(&self.params[0], &self.params[1], &input);
                Activations {
                    input,
                    hidden_pre: Vec::new(),
                    hidden: Vec::new(),
                    probs: softmax(&logits),
                }
            }
            ProbeKind::Mlp => {
                let hidden_pre = affine(&self.params[0], &self.params[1], &input);
                let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
                let logits = affine(&self.params[2], &self.params[3], &hidden);
                Activations {
                    input,
                    hidden_pre,
                    hidden,
                    probs: softmax(&logits),
                }
            }
        }
    }

    /// Class probabilities for one slide embedding.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).probs)
    }

    /// Hidden pre-activations of an MLP (empty for linear probes).
    pub fn hidden_preactivations(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).hidden_pre)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// Mean cross-entropy over the batch.
pub fn loss(model: &ProbeModel, batch: &[(&[f32], usize)]) -> Result<f64> {
    Ok(loss_and_grad(model, batch)?.0)
}

/// Mean cross-entropy over the batch and its gradient by backpropagation.
pub fn loss_and_grad(model: &ProbeModel, batch: &[(&[f32], usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let c = model.config.n_classes;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    let mut total = 0.0;
    for &(x, label) in batch {
        model.check_input(x)?;
        if label >= c {
            return Err(Error::BadLabel(label.to_string()));
        }
        let act = model.activations(x);
        total -= act.probs[label].max(f64::MIN_POSITIVE).ln();
        let mut delta = act.probs;
        delta[label] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= scale);
        match model.config.kind {
            ProbeKind::Linear => {
                outer_acc(&mut grads[0], &delta, &act.input);
                add_acc(&mut grads[1], &delta);
            }
            ProbeKind::Mlp => {
                outer_acc(&mut grads[2], &delta, &act.hidden);
                add_acc(&mut grads[3], &delta);
                let w2 = &model.params[2];
                let mut dhidden = vec![0.0; w2.cols];
                for (row, d) in w2.values.chunks_exact(w2.cols).zip(&delta) {
                    for (h, w) in dhidden.iter_mut().zip(row) {
                        *h += w * d;
                    }
                }
                for (h, pre) in dhidden.iter_mut().zip(&act.hidden_pre) {
                    if *pre <= 0.0 {
                        *h = 0.0;
                    }
                }
                outer_acc(&mut grads[0], &dhidden, &act.input);
                add_acc(&mut grads[1], &dhidden);
            }
        }
    }
    Ok((total * scale, Gradients { tensors: grads }))
}

fn outer_acc(out: &mut [f64], left: &[f64], right: &[f64]) {
    for (row, l) in out.chunks_exact_mut(right.len()).zip(left) {
        if *l == 0.0 {
            continue;
        }
        for (o, r) in row.iter_mut().zip(right) {
            *o += l * r;
        }
    }
}

fn add_acc(out: &mut [f64], v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += x;
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ(1 − lr·λ) − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(model: &mut ProbeModel, grads: &Gradients) -> Result<()> {
    if grads.tensors.len() != model.params.len() {
        return Err(Error::LengthMismatch(grads.tensors.len(), model.params.len()));
    }
    for (p, g) in model.params.iter().zip(&grads.tensors) {
        if g.len() != p.values.len() {
            return Err(Error::LengthMismatch(g.len(), p.values.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name));
        }
    }
    let lr = model.config.learning_rate;
    let decay = 1.0 - lr * model.config.weight_decay;
    model.step += 1;
    let t = model.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    for (k, g) in grads.tensors.iter().enumerate() {
        let m = &mut model.first_moment[k];
        let v = &mut model.second_moment[k];
        for (((theta, g), m), v) in model.params[k].values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Slide embeddings (one per row) with class labels.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSet<'a> {
    pub features: &'a EmbeddingMatrix,
    pub labels: &'a [usize],
}

impl<'a> LabeledSet<'a> {
    pub fn new(features: &'a EmbeddingMatrix, labels: &'a [usize]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch(features.rows(), labels.len()));
        }
        Ok(Self { features, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_balanced_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_balanced_accuracy));
        }
        out
    }
}

/// Minibatch AdamW with per-epoch seeded shuffling; keeps the parameters of
/// the epoch with the best validation balanced accuracy (earliest on ties).
/// Without a validation set, training balanced accuracy is used instead.
pub fn train_probe(
    train: LabeledSet<'_>,
    val: Option<LabeledSet<'_>>,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, TrainingLog)> {
    cfg.validate()?;
    if train.labels.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    if train.features.dim() != cfg.input_dim {
        return Err(Error::DimMismatch {
            expected: cfg.input_dim,
            actual: train.features.dim(),
        });
    }
    let mut model = init_probe(cfg)?;
    let mut best: Option<(f64, ProbeModel)> = None;
    let mut log = TrainingLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f32], usize)> = chunk
                .iter()
                .map(|&i| (train.features.row(i), train.labels[i]))
                .collect();
            let (loss, grads) = loss_and_grad(&model, &batch)?;
            loss_sum += loss * batch.len() as f64;
            adamw_step(&mut model, &grads)?;
        }
        let score = evaluate_balanced_accuracy(&model, val.unwrap_or(train))?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.labels.len() as f64,
            val_balanced_accuracy: score,
        });
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, model.clone()));
            log.best_epoch = epoch;
        }
    }
    Ok((best.map_or(model, |(_, m)| m), log))
}

fn evaluate_balanced_accuracy(model: &ProbeModel, set: LabeledSet<'_>) -> Result<f64> {
    let preds = predict(model, set.features)?;
    balanced_accuracy(&confusion_matrix(set.labels, &preds, model.config.n_classes)?)
}

/// Argmax class per row; ties go to the smaller class index.
pub fn predict(model: &ProbeModel, features: &EmbeddingMatrix) -> Result<Vec<usize>> {
    features
        .iter_rows()
        .map(|x| Ok(argmax_first(model.forward(x)?).unwrap_or(0)))
        .collect()
}

// --- serialization ----------------------------------------------------------

pub const MODEL_MAGIC: [u8; 4] = *b"PAPB";
pub const MODEL_VERSION: u32 = 1;

/// Binary model layout (little-endian): magic `PAPB`, version `u32`, kind
/// `u32` (0 linear, 1 MLP), then `u64` input_dim, hidden_dim, n_classes,
/// epochs, batch_size, seed, step, `f64` learning_rate, weight_decay, then
/// `u32` tensor count followed by each tensor as `u64` rows, `u64` cols and
/// a row-major `f64` payload: parameters, then first moments, then second
/// moments.
pub fn encode_model(model: &ProbeModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let kind: u32 = match c.kind {
        ProbeKind::Linear => 0,
        ProbeKind::Mlp => 1,
    };
    out.extend_from_slice(&kind.to_le_bytes());
    for v in [c.input_dim, c.hidden_dim, c.n_classes, c.epochs, c.batch_size] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&c.learning_rate.to_le_bytes());
    out.extend_from_slice(&c.weight_decay.to_le_bytes());
    let tensors = model.params.len() * 3;
    out.extend_from_slice(&(tensors as u32).to_le_bytes());
    let blocks = model
        .params
        .iter()
        .map(|p| &p.values)
        .chain(&model.first_moment)
        .chain(&model.second_moment);
    for (k, values) in blocks.enumerate() {
        let p = &model.params[k % model.params.len()];
        out.extend_from_slice(&(p.rows as u64).to_le_bytes());
        out.extend_from_slice(&(p.cols as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ProbeModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
            expected: MODEL_MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = match cur.u32()? {
        0 => ProbeKind::Linear,
        1 => ProbeKind::Mlp,
        other => return Err(Error::Malformed(format!("unknown probe kind {other}"))),
    };
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = cur.u64()? as usize;
    }
    let seed = cur.u64()?;
    let step = cur.u64()?;
    let learning_rate = cur.f64()?;
    let weight_decay = cur.f64()?;
    let cfg = ProbeConfig {
        kind,
        input_dim: dims[0],
        hidden_dim: dims[1],
        n_classes: dims[2],
        learning_rate,
        weight_decay,
        epochs: dims[3],
        batch_size: dims[4],
        seed,
    };
    let mut model = init_probe(&cfg)?;
    let count = cur.u32()? as usize;
    if count != model.params.len() * 3 {
        return Err(Error::Malformed(format!("expected {} tensors, found {count}", model.params.len() * 3)));
    }
    let n = model.params.len();
    for k in 0..count {
        let (rows, cols) = (cur.u64()? as usize, cur.u64()? as usize);
        let p = &model.params[k % n];
        if (rows, cols) != (p.rows, p.cols) {
            return Err(Error::Malformed(format!("tensor {k} has shape {rows}x{cols}, expected {}x{}", p.rows, p.cols)));
        }
        let values = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite value in tensor {k}")));
        }
        match k / n {
            0 => model.params[k].values = values,
            1 => model.first_moment[k - n] = values,
            _ => model.second_moment[k - 2 * n] = values,
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes after model".into()));
    }
    model.step = step;
    Ok(model)
}

pub fn save_model(model: &ProbeModel, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_bytes(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ProbeModel> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear(input_dim: usize, c: usize) -> ProbeModel {
        init_probe(&ProbeConfig::new(ProbeKind::Linear, input_dim, c)).unwrap()
    }

    fn zero_out(model: &mut ProbeModel) {
        model.params.iter_mut().for_each(|p| p.values.iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ProbeConfig::new(ProbeKind::Linear, 4, 2);
        let a = init_probe(&cfg).unwrap();
        assert_eq!(a, init_probe(&cfg).unwrap());
        assert_eq!((a.params[0].rows, a.params[0].cols), (2, 4));
        assert_eq!(a.params[1].values, vec![0.0, 0.0]);
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(a.params[0].values.iter().all(|v| v.abs() <= bound));
        let mut mlp = ProbeConfig::new(ProbeKind::Mlp, 4, 2);
        mlp.hidden_dim = 0;
        assert!(matches!(init_probe(&mlp), Err(Error::BadConfig(_))));
        let mut one = cfg.clone();
        one.n_classes = 1;
        assert!(init_probe(&one).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut m = linear(5, 3);
        zero_out(&mut m);
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn identity_linear_ln2() {
        let mut m = linear(2, 2);
        m.params[0].values = vec![1.0, 0.0, 0.0, 1.0];
        m.params[1].values = vec![0.0, 0.0];
        let p = m.forward(&[std::f32::consts::LN_2, 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn mlp_dead_hidden_layer() {
        let mut cfg = ProbeConfig::new(ProbeKind::Mlp, 2, 3);
        cfg.hidden_dim = 4;
        let mut m = init_probe(&cfg).unwrap();
        m.params[0].values.iter_mut().for_each(|v| *v = 1.0);
        m.params[1].values.iter_mut().for_each(|v| *v = -100.0);
        m.params[3].values = vec![0.0, (2.0f64).ln(), 0.0];
        let p = m.forward(&[1.0, 2.0]).unwrap();
        assert!(m.hidden_preactivations(&[1.0, 2.0]).unwrap().iter().all(|v| *v < 0.0));
        let want = softmax(&[0.0, 2f64.ln(), 0.0]);
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_cases() {
        let mut m = linear(2, 2);
        zero_out(&mut m);
        let x = [0.3f32, -0.7];
        let l = loss(&m, &[(&x, 0), (&x, 1)]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        m.params[1].values = vec![60.0, 0.0];
        assert!(loss(&m, &[(&x, 0)]).unwrap() < 1e-20);
        assert!(matches!(loss(&m, &[(&x, 2)]), Err(Error::BadLabel(_))));
        assert!(loss(&m, &[]).is_err());
    }

    #[test]
    fn adamw_fixed_points() {
        let mut m = linear(3, 2);
        let before = m.params.clone();
        let zeros = Gradients {
            tensors: m.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        };
        m.config.weight_decay = 0.0;
        adamw_step(&mut m, &zeros).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(m.step, 1);

        m.config.weight_decay = 0.5;
        m.config.learning_rate = 0.01;
        adamw_step(&mut m, &zeros).unwrap();
        for (p, q) in m.params.iter().zip(&before) {
            for (a, b) in p.values.iter().zip(&q.values) {
                assert_eq!(*a, b * (1.0 - 0.01 * 0.5));
            }
        }
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut m = linear(2, 2);
        m.config.weight_decay = 0.0;
        let before = m.params.clone();
        let g = vec![vec![0.5, -2.0, 1e-3, -7.0], vec![3.0, -0.25]];
        adamw_step(&mut m, &Gradients { tensors: g.clone() }).unwrap();
        // hand computation: m̂ = g, v̂ = g², update = -lr·g/(|g|+ε)
        for k in 0..2 {
            for (i, gi) in g[k].iter().enumerate() {
                let want = before[k].values[i] - 1e-4 * gi / (gi.abs() + EPSILON);
                assert!((m.params[k].values[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut m = linear(2, 2);
        let g = Gradients {
            tensors: vec![vec![f64::NAN, 0.0, 0.0, 0.0], vec![0.0, 0.0]],
        };
        assert!(matches!(adamw_step(&mut m, &g), Err(Error::NonFiniteGradient("weight"))));
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let mut m = linear(3, 3);
        m.config.learning_rate = 0.0;
        let before = m.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let g = Gradients {
                tensors: m.params.iter().map(|p| (0..p.values.len()).map(|_| rng.random_range(-9.0..9.0)).collect()).collect(),
            };
            adamw_step(&mut m, &g).unwrap();
        }
        assert_eq!(m.params, before);
    }

    #[test]
    fn predict_ties_and_order() {
        let mut m = linear(1, 3);
        zero_out(&mut m);
        let x = EmbeddingMatrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(predict(&m, &x).unwrap(), vec![0, 0, 0]);
        m.params[1].values = vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        assert_eq!(predict(&m, &x).unwrap(), vec![1, 1, 1]);
        m.params[0].values = vec![0.0, 0.0, 1.0];
        // logits grow with x for class 2 only
        assert_eq!(predict(&m, &x).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let x = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = [0, 1];
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, 2, 2);
        cfg.epochs = 0;
        let (m, log) = train_probe(LabeledSet::new(&x, &y).unwrap(), None, &cfg).unwrap();
        assert_eq!(m, init_probe(&cfg).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn model_roundtrip() {
        let mut cfg = ProbeConfig::new(ProbeKind::Mlp, 3, 2);
        cfg.hidden_dim = 5;
        cfg.seed = 42;
        let x = EmbeddingMatrix::new(4, 3, (0..12).map(|v| v as f32 / 10.0).collect()).unwrap();
        let y = [0, 1, 0, 1];
        cfg.epochs = 3;
        let (m, _) = train_probe(LabeledSet::new(&x, &y).unwrap(), None, &cfg).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic { .. })));
    }
}
