//! Synthetic datasets with planted prototype structure, plus naive reference
//! implementations used as test oracles.
//!
//! Noise convention: `noise_std` is the RMS length of a patch's noise vector,
//! i.e. each coordinate gets `N(0, noise_std² / dim)`. Prototype centers share
//! one norm, so dot-product argmax and nearest-center assignment agree on
//! noise-free patches.

use std::path::{Path, PathBuf};

use rand::distr::{Distribution, Uniform};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{encode_paem, make_splits, manifest_to_string, text_bank_to_string, write_bytes};
use crate::matrix::EmbeddingMatrix;
use crate::types::{AssignmentMap, DatasetManifest, PrototypeDescriptor, SlideRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_proto: usize,
    pub dim: usize,
    /// Slides per split: train, val, test.
    pub n_slides: [usize; 3],
    /// Inclusive range of patches per slide.
    pub patches_per_slide: (usize, usize),
    /// Minimum pairwise center distance, in units of `noise_std`.
    pub center_separation: f64,
    pub noise_std: f64,
    pub n_classes: usize,
    pub seed: u64,
    /// Concentration of each class's Dirichlet mixture signature.
    pub dirichlet_alpha: f64,
    /// Fraction of prototypes each class draws patches from.
    pub support_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_proto: 16,
            dim: 32,
            n_slides: [60, 20, 20],
            patches_per_slide: (50, 200),
            center_separation: 4.0,
            noise_std: 1.0,
            n_classes: 4,
            seed: 0,
            dirichlet_alpha: 1.0,
            support_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.n_proto == 0 || self.dim == 0 {
            return bad("n_proto and dim must be positive");
        }
        if !(self.center_separation > 0.0 && self.center_separation.is_finite()) {
            return bad("center_separation must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative");
        }
        let (lo, hi) = self.patches_per_slide;
        if lo < 1 || hi < lo {
            return bad("patches_per_slide needs 1 <= lo <= hi");
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.n_slides[0] == 0 {
            return bad("need at least one training slide");
        }
        if !(self.dirichlet_alpha > 0.0) || !(self.support_fraction > 0.0 && self.support_fraction <= 1.0) {
            return bad("dirichlet_alpha must be positive and support_fraction in (0, 1]");
        }
        Ok(())
    }

    fn support_size(&self) -> usize {
        let k = self.n_proto;
        ((k as f64 * self.support_fraction).round() as usize).max(k.min(2)).min(k)
    }
}

/// Ground truth behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub centers: Vec<Vec<f32>>,
    /// Mixture weights over prototypes, one row per class.
    pub class_signatures: Vec<Vec<f64>>,
    /// Per slide (manifest order): slide id, label and true prototype per patch.
    pub slides: Vec<PlantedSlide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSlide {
    pub slide_id: String,
    pub label: usize,
    pub mixture: Vec<f64>,
    pub patch_prototypes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub manifest: DatasetManifest,
    /// Patch matrices in manifest order.
    pub slides: Vec<EmbeddingMatrix>,
    pub descriptors: Vec<PrototypeDescriptor>,
    pub texts: EmbeddingMatrix,
    pub truth: PlantedTruth,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEXT_BANK_FILE: &str = "text_bank.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Serialize, Deserialize)]
struct TruthDoc {
    config: SynthConfig,
    truth: PlantedTruth,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

/// Generates a dataset deterministically from `cfg.seed`.
///
/// Steps: unit-norm random center directions rescaled so the closest pair is
/// `center_separation * noise_std` apart (unit 1 when `noise_std` is 0); text
/// embeddings at `0.1 * noise_std` RMS from the centers; per class a Dirichlet
/// signature over a random subset of prototypes; slide labels cycle through
/// the classes and a stratified split matches the requested split sizes;
/// every patch picks its prototype from the class signature and adds noise.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, dim) = (cfg.n_proto, cfg.dim);
    let coord_std = cfg.noise_std / (dim as f64).sqrt();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let v = gaussian_vec(&mut rng, dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            centers.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let unit = if cfg.noise_std > 0.0 { cfg.noise_std } else { 1.0 };
    let target = cfg.center_separation * unit;
    let scale = match min_pairwise_distance(&centers) {
        Some(d) if d > 0.0 => target / d,
        Some(_) => return Err(Error::BadConfig("degenerate center draw".into())),
        None => target,
    };
    // round outward so the f32 centers keep the minimum distance
    let scale = scale * (1.0 + 1e-6);
    let centers_f32: Vec<Vec<f32>> = centers
        .iter()
        .map(|c| c.iter().map(|v| (v * scale) as f32).collect())
        .collect();

    let descriptors: Vec<PrototypeDescriptor> = centers_f32
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let jitter = gaussian_vec(&mut rng, dim, 0.1 * coord_std);
            PrototypeDescriptor {
                index: j,
                name: format!("proto-{j:02}"),
                description: format!("planted prototype {j}"),
                text_embedding: c.iter().zip(&jitter).map(|(&c, n)| (c as f64 + n) as f32).collect(),
            }
        })
        .collect();
    let texts = EmbeddingMatrix::from_rows(
        &descriptors.iter().map(|d| d.text_embedding.as_slice()).collect::<Vec<_>>(),
    )?;

    let support = cfg.support_size();
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).map_err(|e| Error::BadConfig(e.to_string()))?;
    let class_signatures: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let chosen = index::sample(&mut rng, k, support).into_vec();
            let mut draws: Vec<f64> = (0..support).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let total: f64 = draws.iter().sum();
            draws.iter_mut().for_each(|d| *d /= total);
            let mut sig = vec![0.0; k];
            for (j, w) in chosen.into_iter().zip(draws) {
                sig[j] = w;
            }
            sig
        })
        .collect();

    let n_total: usize = cfg.n_slides.iter().sum();
    let items: Vec<(String, usize)> = (0..n_total)
        .map(|i| (format!("slide_{i:05}"), i % cfg.n_classes))
        .collect();
    let ratios = cfg.n_slides.map(|n| n as f64 / n_total as f64);
    let ratio_sum: f64 = ratios.iter().sum();
    let ratios = [ratios[0] + (1.0 - ratio_sum), ratios[1], ratios[2]];
    let splits = make_splits(&items, ratios, cfg.seed)?;

    let patch_count = Uniform::new_inclusive(cfg.patches_per_slide.0, cfg.patches_per_slide.1)
        .expect("lo <= hi");
    let noise = (coord_std > 0.0).then(|| Normal::new(0.0, coord_std).expect("finite std"));
    let mut records = Vec::with_capacity(n_total);
    let mut slides = Vec::with_capacity(n_total);
    let mut planted = Vec::with_capacity(n_total);
    for (id, label) in items {
        let n = patch_count.sample(&mut rng);
        let sig = &class_signatures[label];
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut z = sig.iter().rposition(|w| *w > 0.0).unwrap_or(0);
            for (j, w) in sig.iter().enumerate() {
                acc += w;
                if *w > 0.0 && u < acc {
                    z = j;
                    break;
                }
            }
            labels.push(z);
            for &c in &centers_f32[z] {
                let e = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                data.push((c as f64 + e) as f32);
            }
        }
        records.push(SlideRecord {
            slide_id: id.clone(),
            embedding_path: format!("slides/{id}.paem"),
            label,
            split: splits[&id],
        });
        slides.push(EmbeddingMatrix::new(n, dim, data)?);
        planted.push(PlantedSlide {
            slide_id: id,
            label,
            mixture: sig.clone(),
            patch_prototypes: labels,
        });
    }

    Ok(SynthDataset {
        config: cfg.clone(),
        manifest: DatasetManifest::new(records)?,
        slides,
        descriptors,
        texts,
        truth: PlantedTruth {
            centers: centers_f32,
            class_signatures,
            slides: planted,
        },
    })
}

impl SynthDataset {
    /// Every file of the dataset directory as `(relative path, bytes)`:
    /// one PAEM per slide, `manifest.csv`, `text_bank.json` and `truth.json`.
    pub fn encode_files(&self) -> Result<Vec<(PathBuf, Vec<u8>)>> {
        let mut files: Vec<(PathBuf, Vec<u8>)> = self
            .manifest
            .records()
            .iter()
            .zip(&self.slides)
            .map(|(r, m)| (PathBuf::from(&r.embedding_path), encode_paem(m)))
            .collect();
        files.push((MANIFEST_FILE.into(), manifest_to_string(&self.manifest).into_bytes()));
        files.push((TEXT_BANK_FILE.into(), text_bank_to_string(&self.descriptors)?.into_bytes()));
        let doc = TruthDoc {
            config: self.config.clone(),
            truth: self.truth.clone(),
        };
        let mut text = serde_json::to_string(&doc)?;
        text.push('\n');
        files.push((TRUTH_FILE.into(), text.into_bytes()));
        Ok(files)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (rel, bytes) in self.encode_files()? {
            write_bytes(&dir.as_ref().join(rel), &bytes)?;
        }
        Ok(())
    }
}

/// Text bank with `k` prototypes for prototype-count sweeps.
///
/// The first `k` planted descriptors when `k` is at most the planted count;
/// otherwise every planted descriptor followed by extra ones placed at the
/// midpoint of two randomly chosen planted text embeddings.
pub fn text_bank_of_size(planted: &[PrototypeDescriptor], k: usize, seed: u64) -> Result<Vec<PrototypeDescriptor>> {
    if k == 0 {
        return Err(Error::BadConfig("text bank size must be positive".into()));
    }
    if k <= planted.len() {
        return Ok(planted[..k].to_vec());
    }
    if planted.len() < 2 {
        return Err(Error::BadConfig("need two planted prototypes to derive extra ones".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut out = planted.to_vec();
    while out.len() < k {
        let pair = index::sample(&mut rng, planted.len(), 2).into_vec();
        let (a, b) = (&planted[pair[0]], &planted[pair[1]]);
        out.push(PrototypeDescriptor {
            index: out.len(),
            name: format!("mix-{:02}-{:02}", a.index, b.index),
            description: format!("midpoint of {} and {}", a.name, b.name),
            text_embedding: a
                .text_embedding
                .iter()
                .zip(&b.text_embedding)
                .map(|(&x, &y)| ((x as f64 + y as f64) / 2.0) as f32)
                .collect(),
        });
    }
    Ok(out)
}

/// File name of the sweep text bank with `k` prototypes.
pub fn sized_text_bank_file(k: usize) -> String {
    format!("text_bank_{k}.json")
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<(SynthConfig, PlantedTruth)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: TruthDoc = serde_json::from_str(&text)?;
    Ok((doc.config, doc.truth))
}

/// Fraction of patches assigned to their planted prototype.
pub fn assignment_recovery_rate(asn: &AssignmentMap, planted: &[usize]) -> Result<f64> {
    if asn.n_patches() != planted.len() || planted.is_empty() {
        return Err(Error::LengthMismatch(asn.n_patches(), planted.len()));
    }
    let hits = asn
        .patch_to_proto
        .iter()
        .zip(planted)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / planted.len() as f64)
}

/// Index of the closest center (Euclidean) per patch, first on ties.
pub fn nearest_center_labels(patches: &EmbeddingMatrix, centers: &[Vec<f32>]) -> Vec<usize> {
    patches
        .iter_rows()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d: f64 = x.iter().zip(c).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

// --- naive reference ----------------------------------------------------------

fn naive_dot(a: &[f32], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] as f64 * b[k];
    }
    s
}

/// Initial prototypes by patch-text contrast, with plain loops in `f64`.
pub fn brute_force_initial_prototypes(pool: &EmbeddingMatrix, texts: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    assert!(pool.rows() >= 1);
    let mut out = Vec::new();
    for j in 0..texts.rows() {
        let t: Vec<f64> = texts.row(j).iter().map(|&v| v as f64).collect();
        let mut best_i = 0;
        let mut best_s = f64::NEG_INFINITY;
        for i in 0..pool.rows() {
            let s = naive_dot(pool.row(i), &t);
            if s > best_s {
                best_s = s;
                best_i = i;
            }
        }
        out.push(
            (0..texts.dim())
                .map(|k| (texts.row(j)[k] + pool.row(best_i)[k]) as f64)
                .collect(),
        );
    }
    out
}

/// Slide embedding from initial prototypes: similarity, argmax assignment,
/// softmax of raw exponentials (no max shift), weighted sum, concatenation.
pub fn brute_force_slide_embedding(patches: &EmbeddingMatrix, prototypes: &[Vec<f64>]) -> Vec<f64> {
    let n = patches.rows();
    assert!(n >= 1, "reference pipeline needs at least one patch");
    let k = prototypes.len();
    let d = patches.dim();
    let mut sim = vec![vec![0.0f64; k]; n];
    for i in 0..n {
        for j in 0..k {
            sim[i][j] = naive_dot(patches.row(i), &prototypes[j]);
        }
    }
    let mut owner = vec![0usize; n];
    for i in 0..n {
        for j in 1..k {
            if sim[i][j] > sim[i][owner[i]] {
                owner[i] = j;
            }
        }
    }
    let mut out = Vec::with_capacity(k * d);
    for j in 0..k {
        let mut denom = 0.0;
        for i in 0..n {
            if owner[i] == j {
                denom += sim[i][j].exp();
            }
        }
        if denom == 0.0 {
            out.extend_from_slice(&prototypes[j]);
            continue;
        }
        let mut p = vec![0.0f64; d];
        for i in 0..n {
            if owner[i] == j {
                let a = sim[i][j].exp() / denom;
                for c in 0..d {
                    p[c] += a * patches.row(i)[c] as f64;
                }
            }
        }
        out.extend(p);
    }
    out
}

/// Full reference chain: initial prototypes from `(pool, texts)`, then the
/// slide embedding of `patches`.
pub fn brute_force_pipeline(pool: &EmbeddingMatrix, texts: &EmbeddingMatrix, patches: &EmbeddingMatrix) -> Vec<f64> {
    let protos = brute_force_initial_prototypes(pool, texts);
    brute_force_slide_embedding(patches, &protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::init_from_text;
    use crate::pfam::embed_slide;
    use crate::types::Split;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_proto: 4,
            dim: 8,
            n_slides: [12, 4, 4],
            patches_per_slide: (5, 20),
            n_classes: 2,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn worked_reference_chain() {
        let x = EmbeddingMatrix::from_rows(&[[1.0f32, 1.0], [2.0, 0.0], [0.0, 3.0]]).unwrap();
        let p = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let e = brute_force_slide_embedding(&x, &p);
        let want = [0.0, 3.0, 1.88080, 0.11920];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        let single = EmbeddingMatrix::from_rows(&[[0.25f32, -4.0]]).unwrap();
        assert_eq!(brute_force_slide_embedding(&single, &[vec![1.0, 1.0]]), vec![0.25, -4.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = small(0);
        c.patches_per_slide = (0, 3);
        assert!(matches!(generate_synthetic_dataset(&c), Err(Error::BadConfig(_))));
        let mut c = small(0);
        c.center_separation = 0.0;
        assert!(generate_synthetic_dataset(&c).is_err());
    }

    #[test]
    fn split_sizes_match_request() {
        let ds = generate_synthetic_dataset(&small(3)).unwrap();
        assert_eq!(ds.manifest.count(Split::Train), 12);
        assert_eq!(ds.manifest.count(Split::Val), 4);
        assert_eq!(ds.manifest.count(Split::Test), 4);
        for (s, t) in ds.slides.iter().zip(&ds.truth.slides) {
            assert_eq!(s.rows(), t.patch_prototypes.len());
            assert!((5..=20).contains(&s.rows()));
            assert!((t.mixture.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centers_respect_separation() {
        let ds = generate_synthetic_dataset(&small(5)).unwrap();
        let c: Vec<Vec<f64>> = ds.truth.centers.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        let d = min_pairwise_distance(&c).unwrap();
        assert!(d >= 4.0 && d < 4.0 + 1e-4, "{d}");
    }

    #[test]
    fn zero_noise_recovers_everything() {
        let mut cfg = small(9);
        cfg.noise_std = 0.0;
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let pool = EmbeddingMatrix::from_rows(
            &ds.slides.iter().flat_map(|s| s.iter_rows().map(<[f32]>::to_vec)).collect::<Vec<_>>(),
        )
        .unwrap();
        let bank = init_from_text(&pool, &ds.texts, ds.descriptors.clone(), false).unwrap();
        for (s, t) in ds.slides.iter().zip(&ds.truth.slides) {
            let out = embed_slide(s, &bank, &t.slide_id, false).unwrap();
            assert_eq!(assignment_recovery_rate(&out.assignment, &t.patch_prototypes).unwrap(), 1.0);
            for (row, &z) in s.iter_rows().zip(&t.patch_prototypes) {
                assert_eq!(row, ds.truth.centers[z].as_slice());
            }
        }
    }

    #[test]
    fn nearest_center_matches_planted_at_high_separation() {
        let cfg = SynthConfig {
            n_proto: 2,
            dim: 2,
            center_separation: 8.0,
            ..small(1)
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        for (s, t) in ds.slides.iter().zip(&ds.truth.slides) {
            assert_eq!(nearest_center_labels(s, &ds.truth.centers), t.patch_prototypes);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_synthetic_dataset(&small(4)).unwrap(), generate_synthetic_dataset(&small(4)).unwrap());
        assert_ne!(generate_synthetic_dataset(&small(4)).unwrap().slides, generate_synthetic_dataset(&small(5)).unwrap().slides);
    }

    #[test]
    fn sized_text_banks() {
        let ds = generate_synthetic_dataset(&small(2)).unwrap();
        assert_eq!(text_bank_of_size(&ds.descriptors, 2, 0).unwrap(), ds.descriptors[..2].to_vec());
        let big = text_bank_of_size(&ds.descriptors, 7, 0).unwrap();
        assert_eq!(big.len(), 7);
        assert_eq!(&big[..4], ds.descriptors.as_slice());
        assert!(big.iter().enumerate().all(|(i, d)| d.index == i && d.text_embedding.len() == 8));
        assert_eq!(big, text_bank_of_size(&ds.descriptors, 7, 0).unwrap());
        assert!(text_bank_of_size(&ds.descriptors, 0, 0).is_err());
    }

    #[test]
    fn random_assignment_recovers_one_over_k() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let planted: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let guess: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut members = vec![Vec::new(); k];
        for (i, &g) in guess.iter().enumerate() {
            members[g].push(i);
        }
        let asn = AssignmentMap {
            patch_to_proto: guess,
            best_similarity: vec![0.0; n],
            proto_members: members,
        };
        let r = assignment_recovery_rate(&asn, &planted).unwrap();
        assert!((r - 0.25).abs() < 0.05, "{r}");
        assert!(assignment_recovery_rate(&asn, &planted[..10]).is_err());
    }
}
