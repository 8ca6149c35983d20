//! Initial prototype bank construction.
//!
//! The main route is patch-text contrast: every prototype's text embedding
//! picks its most similar patch from a sampled training pool and the two are
//! summed. A seeded k-means over the same pool is provided as a baseline.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_paem_header, resolve_embedding_path};
use crate::matrix::{l2_normalize_rows, similarity, EmbeddingMatrix, SimilarityMatrix};
use crate::types::{DatasetManifest, PrototypeBank, PrototypeDescriptor, PrototypeInitConfig, Split};

/// Where one pool row came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub slide_id: String,
    pub row: usize,
}

/// A train slide that had fewer patches than the per-slide quota.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub slide_id: String,
    pub available: usize,
    pub quota: usize,
}

/// `X_proto`: patches sampled from the training slides.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSamplePool {
    pub matrix: EmbeddingMatrix,
    pub provenance: Vec<PatchOrigin>,
    pub seed: u64,
    pub quota: usize,
    pub shortfalls: Vec<Shortfall>,
}

/// Samples `min(q, n_i)` distinct rows from each slide with
/// `q = floor(n_total / n_slides)`.
///
/// Slide `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so the
/// draw for one slide does not depend on how many rows the others have.
/// Sampled rows keep their source order within each slide.
pub fn sample_from_slides(
    slides: &[(String, EmbeddingMatrix)],
    cfg: &PrototypeInitConfig,
) -> Result<PatchSamplePool> {
    if slides.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let dim = slides[0].1.dim();
    for (id, m) in slides {
        if m.dim() != dim {
            return Err(Error::DimMismatchAcrossSlides {
                slide_id: id.clone(),
                expected: dim,
                actual: m.dim(),
            });
        }
    }
    let quota = cfg.n_total / slides.len();
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    let mut shortfalls = Vec::new();
    for (i, (id, m)) in slides.iter().enumerate() {
        let rows = sample_rows(m.rows(), quota, cfg.seed, i as u64);
        if m.rows() < quota {
            shortfalls.push(Shortfall {
                slide_id: id.clone(),
                available: m.rows(),
                quota,
            });
        }
        for r in rows {
            data.extend_from_slice(m.row(r));
            provenance.push(PatchOrigin {
                slide_id: id.clone(),
                row: r,
            });
        }
    }
    if provenance.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(PatchSamplePool {
        matrix: EmbeddingMatrix::new(provenance.len(), dim, data)?,
        provenance,
        seed: cfg.seed,
        quota,
        shortfalls,
    })
}

fn sample_rows(n: usize, quota: usize, seed: u64, stream: u64) -> Vec<usize> {
    if n <= quota {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = index::sample(&mut rng, n, quota).into_vec();
    picked.sort_unstable();
    picked
}

/// Samples the pool from the train split of a manifest on disk.
///
/// All train slide headers are checked for a common dim before any payload
/// is read.
pub fn sample_training_patches(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    cfg: &PrototypeInitConfig,
) -> Result<PatchSamplePool> {
    let train: Vec<_> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let mut dim = None;
    for r in &train {
        let header = read_paem_header(resolve_embedding_path(manifest_path, r))?;
        let d = header.cols as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DimMismatchAcrossSlides {
                    slide_id: r.slide_id.clone(),
                    expected,
                    actual: d,
                })
            }
            _ => {}
        }
    }
    let slides = train
        .iter()
        .map(|r| {
            let m = crate::io::read_slide(&resolve_embedding_path(manifest_path, r), &r.slide_id)?;
            Ok((r.slide_id.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    sample_from_slides(&slides, cfg)
}

/// `S = X_proto T_proto^T`.
pub fn compute_patch_text_similarity(
    pool: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
) -> Result<SimilarityMatrix> {
    similarity(pool, texts)
}

/// `p_j = t_j + x_{i*}` with `i* = argmax_i S[i][j]` (ties to the smaller row).
///
/// The returned bank records `i*` per prototype as its anchors.
pub fn build_initial_prototypes(
    pool: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    descriptors: Option<Vec<PrototypeDescriptor>>,
    sim: &SimilarityMatrix,
) -> Result<PrototypeBank> {
    if sim.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    if sim.rows() != pool.rows() || sim.cols() != texts.rows() {
        return Err(Error::ShapeMismatch {
            rows: pool.rows(),
            dim: texts.rows(),
            expected: pool.rows() * texts.rows(),
            actual: sim.values().len(),
        });
    }
    if pool.dim() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: texts.dim(),
            actual: pool.dim(),
        });
    }
    let mut data = Vec::with_capacity(texts.rows() * texts.dim());
    let mut anchors = Vec::with_capacity(texts.rows());
    for j in 0..texts.rows() {
        let best = sim.column_argmax(j).ok_or(Error::EmptyPool)?;
        anchors.push(best);
        data.extend(texts.row(j).iter().zip(pool.row(best)).map(|(t, x)| t + x));
    }
    let matrix = EmbeddingMatrix::new(texts.rows(), texts.dim(), data)?;
    PrototypeBank::initial(matrix, descriptors)?.with_anchors(anchors)
}

/// Patch-text contrast end to end, optionally on L2-normalized rows.
pub fn init_from_text(
    pool: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    descriptors: Vec<PrototypeDescriptor>,
    normalize: bool,
) -> Result<PrototypeBank> {
    let (pool, texts) = if normalize {
        (l2_normalize_rows(pool).matrix, l2_normalize_rows(texts).matrix)
    } else {
        (pool.clone(), texts.clone())
    };
    let sim = compute_patch_text_similarity(&pool, &texts)?;
    build_initial_prototypes(&pool, &texts, Some(descriptors), &sim)
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub bank: PrototypeBank,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Centroids are kept in `f64` during the iterations. Stops once the largest
/// centroid shift drops below `tol` or after `max_iters` updates. An empty
/// cluster is moved onto the point farthest from its current centroid.
pub fn kmeans_init(
    pool: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = pool.rows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { k, points: n });
    }
    let dim = pool.dim();
    let points: Vec<Vec<f64>> = pool
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);

    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        inertia.push(assign(&points, &centroids, &mut labels, &mut dists));
        if converged || iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let new = if counts[c] == 0 {
                let far = farthest_point(&dists);
                dists[far] = 0.0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        converged = shift < tol;
    }

    let data = centroids
        .iter()
        .flat_map(|c| c.iter().map(|&v| v as f32))
        .collect();
    let matrix = EmbeddingMatrix::new(k, dim, data)?;
    let descriptors = (0..k)
        .map(|j| PrototypeDescriptor {
            index: j,
            name: format!("cluster-{j}"),
            description: format!("k-means centroid {j}"),
            text_embedding: matrix.row(j).to_vec(),
        })
        .collect();
    Ok(KMeansResult {
        bank: PrototypeBank::initial(matrix, Some(descriptors))?,
        inertia,
        iterations,
        converged,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn farthest_point(dists: &[f64]) -> usize {
    crate::matrix::argmax_first(dists.iter().copied()).unwrap_or(0)
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
        total += best.1;
    }
    total
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = Uniform::new(0, n).expect("n > 0").sample(rng);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn naive_sim(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let mut s = 0.0f64;
                for k in 0..a.dim() {
                    s += a.row(i)[k] as f64 * b.row(j)[k] as f64;
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn worked_similarity() {
        let pool = m(&[&[1.0, 1.0], &[2.0, 0.0], &[0.0, 3.0]]);
        let texts = m(&[&[1.0, 2.0], &[3.0, 1.0]]);
        let s = compute_patch_text_similarity(&pool, &texts).unwrap();
        assert_eq!(s.values(), naive_sim(&pool, &texts).as_slice());
        assert_eq!(s.values(), &[3.0, 4.0, 2.0, 6.0, 6.0, 3.0]);
    }

    #[test]
    fn identity_texts_and_zero_pool() {
        let pool = m(&[&[1.5, -2.0], &[0.25, 7.0]]);
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = compute_patch_text_similarity(&pool, &eye).unwrap();
        assert_eq!(s.values(), &[1.5, -2.0, 0.25, 7.0]);
        let zeros = m(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let s = compute_patch_text_similarity(&zeros, &pool).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        let wide = m(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(
            compute_patch_text_similarity(&wide, &pool),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn worked_initial_prototypes() {
        let pool = m(&[&[1.0, 1.0], &[2.0, 0.0], &[0.0, 3.0]]);
        let texts = m(&[&[1.0, 2.0], &[3.0, 1.0]]);
        let s = compute_patch_text_similarity(&pool, &texts).unwrap();
        let bank = build_initial_prototypes(&pool, &texts, None, &s).unwrap();
        assert_eq!(bank.prototype(0), &[1.0, 5.0]);
        assert_eq!(bank.prototype(1), &[5.0, 1.0]);
        assert_eq!(bank.anchors(), Some(&[2, 1][..]));
    }

    #[test]
    fn single_patch_single_prototype() {
        let x = m(&[&[0.5, -1.0, 2.0]]);
        let t = m(&[&[1.0, 1.0, -1.0]]);
        let s = compute_patch_text_similarity(&x, &t).unwrap();
        let bank = build_initial_prototypes(&x, &t, None, &s).unwrap();
        assert_eq!(bank.prototype(0), &[1.5, 0.0, 1.0]);
    }

    #[test]
    fn tied_column_picks_first_row() {
        let s = SimilarityMatrix::from_values(3, 1, vec![5.0, 5.0, 5.0]).unwrap();
        let pool = m(&[&[1.0], &[2.0], &[3.0]]);
        let t = m(&[&[0.0]]);
        let bank = build_initial_prototypes(&pool, &t, None, &s).unwrap();
        assert_eq!(bank.anchors(), Some(&[0][..]));
    }

    fn slide(n: usize, dim: usize, offset: f32) -> EmbeddingMatrix {
        EmbeddingMatrix::new(n, dim, (0..n * dim).map(|v| v as f32 + offset).collect()).unwrap()
    }

    #[test]
    fn quota_per_slide() {
        let cfg = PrototypeInitConfig::new(2, 4, 9, false).unwrap();
        let slides: Vec<_> = (0..4).map(|i| (format!("s{i}"), slide(10, 3, i as f32 * 100.0))).collect();
        let pool = sample_from_slides(&slides, &cfg).unwrap();
        assert_eq!(pool.quota, 2);
        assert_eq!(pool.matrix.rows(), 8);
        for (k, origin) in pool.provenance.iter().enumerate() {
            assert_eq!(origin.slide_id, format!("s{}", k / 2));
            let src = &slides[k / 2].1;
            assert_eq!(pool.matrix.row(k), src.row(origin.row));
        }
        assert!(pool.shortfalls.is_empty());
    }

    #[test]
    fn single_train_slide_takes_full_quota() {
        let cfg = PrototypeInitConfig::new(2, 5, 1, false).unwrap();
        let pool = sample_from_slides(&[("a".into(), slide(100, 2, 0.0))], &cfg).unwrap();
        assert_eq!(pool.matrix.rows(), 10);
        let mut rows: Vec<_> = pool.provenance.iter().map(|o| o.row).collect();
        rows.dedup();
        assert_eq!(rows.len(), 10);
    }

    #[test]
    fn small_slide_shortfall() {
        let cfg = PrototypeInitConfig::new(1, 10, 1, false).unwrap();
        let slides = vec![("big".into(), slide(20, 2, 0.0)), ("small".into(), slide(3, 2, 0.0))];
        let pool = sample_from_slides(&slides, &cfg).unwrap();
        assert_eq!(pool.quota, 5);
        assert_eq!(pool.matrix.rows(), 8);
        assert_eq!(
            pool.shortfalls,
            vec![Shortfall {
                slide_id: "small".into(),
                available: 3,
                quota: 5
            }]
        );
    }

    #[test]
    fn sampling_errors() {
        let cfg = PrototypeInitConfig::new(1, 4, 0, false).unwrap();
        assert!(matches!(sample_from_slides(&[], &cfg), Err(Error::EmptyTrainSplit)));
        let slides = vec![("a".into(), slide(4, 2, 0.0)), ("b".into(), slide(4, 3, 0.0))];
        assert!(matches!(
            sample_from_slides(&slides, &cfg),
            Err(Error::DimMismatchAcrossSlides { .. })
        ));
    }

    fn sorted_centroids(r: &KMeansResult) -> Vec<f32> {
        let mut c = r.bank.matrix().data().to_vec();
        c.sort_by(f32::total_cmp);
        c
    }

    #[test]
    fn kmeans_one_dimensional_pairs() {
        // brute-force oracle: of the 2-partitions of {0, .1, 10, 10.1}, the
        // minimum inertia split is {0, .1} | {10, 10.1}
        let pts = [0.0f64, 0.1, 10.0, 10.1];
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..15 {
            let mut inertia = 0.0;
            for side in [true, false] {
                let g: Vec<f64> = (0..4).filter(|i| (mask >> i & 1 == 1) == side).map(|i| pts[i]).collect();
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                inertia += g.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            if inertia < best.0 {
                best = (inertia, mask);
            }
        }
        assert!(best.1 == 0b0011 || best.1 == 0b1100);

        let pool = m(&[&[0.0], &[0.1], &[10.0], &[10.1]]);
        for seed in 0..20 {
            let r = kmeans_init(&pool, 2, seed, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
            let c = sorted_centroids(&r);
            assert!((c[0] - 0.05).abs() < 1e-6 && (c[1] - 10.05).abs() < 1e-5, "seed {seed}: {c:?}");
        }
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pool = m(&[&[0.0, 1.0], &[3.0, 1.0], &[-2.0, 5.0]]);
        let r = kmeans_init(&pool, 3, 4, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
        assert_eq!(*r.inertia.last().unwrap(), 0.0);
        assert_eq!(r.bank.name(2), "cluster-2");
        assert!(matches!(
            kmeans_init(&pool, 4, 0, 10, 1e-6),
            Err(Error::TooFewPoints { k: 4, points: 3 })
        ));
    }

    #[test]
    fn kmeans_deterministic() {
        let pool = slide(40, 3, 0.5).scaled(0.01).unwrap();
        let a = kmeans_init(&pool, 5, 77, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
        let b = kmeans_init(&pool, 5, 77, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
        let bits = |r: &KMeansResult| r.bank.matrix().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    fn rand_matrix(rows: std::ops::Range<usize>, dim: std::ops::Range<usize>) -> impl Strategy<Value = EmbeddingMatrix> {
        (rows, dim).prop_flat_map(|(r, d)| {
            proptest::collection::vec(-10.0f32..10.0, r * d).prop_map(move |v| EmbeddingMatrix::new(r, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn similarity_matches_naive(pool in rand_matrix(1..200, 32..33), texts in rand_matrix(1..8, 32..33)) {
            let s = compute_patch_text_similarity(&pool, &texts).unwrap();
            for (a, b) in s.values().iter().zip(naive_sim(&pool, &texts)) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn argmax_scale_invariant(pool in rand_matrix(1..30, 1..6), seed in 0u64..1000, k in -10i32..10) {
            // powers of two scale every f32 exactly, so the column order is preserved bit-for-bit
            let c = 2f32.powi(k);
            let d = pool.dim();
            let texts = EmbeddingMatrix::new(3, d, (0..3 * d).map(|i| ((i as u64 * 2654435761 + seed) % 17) as f32 - 8.0).collect()).unwrap();
            let s = compute_patch_text_similarity(&pool, &texts).unwrap();
            let s2 = compute_patch_text_similarity(&pool.scaled(c).unwrap(), &texts).unwrap();
            for j in 0..3 {
                prop_assert_eq!(s.column_argmax(j), s2.column_argmax(j));
            }
        }

        #[test]
        fn prototypes_are_text_plus_pool_row(pool in rand_matrix(1..30, 1..6), texts_seed in any::<u64>()) {
            let d = pool.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(texts_seed);
            let texts = EmbeddingMatrix::new(4, d, (0..4 * d).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap();
            let s = compute_patch_text_similarity(&pool, &texts).unwrap();
            let bank = build_initial_prototypes(&pool, &texts, None, &s).unwrap();
            for j in 0..4 {
                let p = bank.prototype(j);
                let hit = pool.iter_rows().any(|x| {
                    x.iter().zip(texts.row(j)).zip(p).all(|((xv, tv), pv)| (tv + xv).to_bits() == pv.to_bits())
                });
                prop_assert!(hit);
            }
        }

        #[test]
        fn kmeans_inertia_non_increasing(pool in rand_matrix(5..60, 1..4), k in 1usize..5, seed in any::<u64>()) {
            let r = kmeans_init(&pool, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
            for w in r.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.inertia);
            }
        }
    }
}
