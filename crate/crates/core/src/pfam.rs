//! Per-slide prototype refinement with parameter-free attention.
//!
//! Every patch is hard-assigned to its most similar prototype. Each prototype
//! with members is replaced by the softmax-weighted average of those members,
//! using the patch-prototype similarities as logits. Prototypes that received
//! no patches keep their initial embedding. The slide embedding is the
//! concatenation of the refined prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax_first, l2_normalize_rows, similarity, EmbeddingMatrix, SimilarityMatrix};
use crate::types::{AssignmentMap, BankStage, PrototypeBank, SlideEmbedding};

/// `S' = X P^T`.
pub fn compute_patch_prototype_similarity(
    patches: &EmbeddingMatrix,
    bank: &PrototypeBank,
) -> Result<SimilarityMatrix> {
    similarity(patches, bank.matrix())
}

/// Row-wise argmax of `S'`; ties go to the smaller prototype index.
pub fn assign_patches(sim: &SimilarityMatrix) -> AssignmentMap {
    let mut patch_to_proto = Vec::with_capacity(sim.rows());
    let mut best_similarity = Vec::with_capacity(sim.rows());
    let mut proto_members = vec![Vec::new(); sim.cols()];
    for i in 0..sim.rows() {
        let row = sim.row(i);
        let j = argmax_first(row.iter().copied()).unwrap_or(0);
        patch_to_proto.push(j);
        best_similarity.push(row[j]);
        proto_members[j].push(i);
    }
    AssignmentMap {
        patch_to_proto,
        best_similarity,
        proto_members,
    }
}

/// Softmax weights of each prototype's members over their similarity to it,
/// computed with the per-prototype maximum subtracted. Empty prototypes get an
/// empty vector.
pub fn attention_weights(sim: &SimilarityMatrix, asn: &AssignmentMap) -> Vec<Vec<f64>> {
    asn.proto_members
        .iter()
        .enumerate()
        .map(|(j, members)| {
            let max = members
                .iter()
                .map(|&i| sim.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = members.iter().map(|&i| (sim.get(i, j) - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}

/// Builds `P'` for one slide.
pub fn refine_prototypes(
    patches: &EmbeddingMatrix,
    sim: &SimilarityMatrix,
    asn: &AssignmentMap,
    bank: &PrototypeBank,
    slide_id: &str,
) -> Result<PrototypeBank> {
    let dim = bank.dim();
    if patches.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: patches.dim(),
        });
    }
    if sim.rows() != patches.rows()
        || sim.cols() != bank.n_proto()
        || asn.n_patches() != patches.rows()
        || asn.n_proto() != bank.n_proto()
    {
        return Err(Error::ShapeMismatch {
            rows: patches.rows(),
            dim: bank.n_proto(),
            expected: patches.rows() * bank.n_proto(),
            actual: sim.values().len(),
        });
    }
    let weights = attention_weights(sim, asn);
    let mut data = Vec::with_capacity(bank.n_proto() * dim);
    let mut acc = vec![0.0f64; dim];
    for (j, (members, w)) in asn.proto_members.iter().zip(&weights).enumerate() {
        if members.is_empty() {
            data.extend_from_slice(bank.prototype(j));
            continue;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&i, &a) in members.iter().zip(w) {
            for (s, &x) in acc.iter_mut().zip(patches.row(i)) {
                *s += a * x as f64;
            }
        }
        data.extend(acc.iter().map(|&v| v as f32));
    }
    let matrix = EmbeddingMatrix::new(bank.n_proto(), dim, data)?;
    Ok(bank.refined(matrix, slide_id))
}

/// `X' = [p'_0, ..., p'_{n_proto-1}]`.
pub fn build_slide_embedding(refined: &PrototypeBank) -> Result<SlideEmbedding> {
    let BankStage::Refined { slide_id } = refined.stage() else {
        return Err(Error::NotRefined);
    };
    Ok(SlideEmbedding {
        slide_id: slide_id.clone(),
        n_proto: refined.n_proto(),
        dim: refined.dim(),
        values: refined.matrix().data().to_vec(),
    })
}

/// Everything produced while embedding one slide.
#[derive(Clone, Debug)]
pub struct SlideOutcome {
    pub embedding: SlideEmbedding,
    pub assignment: AssignmentMap,
    pub similarity: SimilarityMatrix,
}

/// Similarity, assignment, refinement and concatenation for one slide.
///
/// With `normalize`, patch rows are L2-normalized first (the bank is expected
/// to have been built from normalized rows as well).
pub fn embed_slide(
    patches: &EmbeddingMatrix,
    bank: &PrototypeBank,
    slide_id: &str,
    normalize: bool,
) -> Result<SlideOutcome> {
    let normalized;
    let patches = if normalize {
        normalized = l2_normalize_rows(patches).matrix;
        &normalized
    } else {
        patches
    };
    let sim = compute_patch_prototype_similarity(patches, bank)?;
    let asn = assign_patches(&sim);
    let refined = refine_prototypes(patches, &sim, &asn, bank, slide_id)?;
    Ok(SlideOutcome {
        embedding: build_slide_embedding(&refined)?,
        assignment: asn,
        similarity: sim,
    })
}

/// Slide-level pooling baselines (no prototypes involved).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

/// Elementwise mean or max over all patches, as a one-block slide embedding.
pub fn pool_slide(patches: &EmbeddingMatrix, pooling: Pooling, slide_id: &str) -> SlideEmbedding {
    let dim = patches.dim();
    let values = match pooling {
        Pooling::Mean => {
            let mut acc = vec![0.0f64; dim];
            for row in patches.iter_rows() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|a| (a / patches.rows() as f64) as f32).collect()
        }
        Pooling::Max => {
            let mut acc = vec![f32::NEG_INFINITY; dim];
            for row in patches.iter_rows() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = a.max(v);
                }
            }
            acc
        }
    };
    SlideEmbedding {
        slide_id: slide_id.to_string(),
        n_proto: 1,
        dim,
        values,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPatch {
    pub patch: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeAllocation {
    pub index: usize,
    pub name: String,
    pub patch_count: usize,
    pub proportion: f64,
    pub top_patches: Vec<RankedPatch>,
}

/// Per-slide distribution of patches over prototypes with top exemplars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub slide_id: String,
    pub n_patches: usize,
    pub top_k: usize,
    pub prototypes: Vec<PrototypeAllocation>,
    pub empty_prototypes: Vec<usize>,
}

pub const DEFAULT_TOP_K: usize = 3;

pub fn allocation_report(
    asn: &AssignmentMap,
    sim: &SimilarityMatrix,
    bank: &PrototypeBank,
    top_k: usize,
    slide_id: &str,
) -> Result<AllocationReport> {
    if top_k == 0 {
        return Err(Error::BadConfig("top_k must be at least 1".into()));
    }
    let n = asn.n_patches();
    let prototypes = asn
        .proto_members
        .iter()
        .enumerate()
        .map(|(j, members)| {
            let mut ranked: Vec<RankedPatch> = members
                .iter()
                .map(|&i| RankedPatch {
                    patch: i,
                    similarity: sim.get(i, j),
                })
                .collect();
            // stable sort keeps ascending patch order among equal similarities
            ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
            ranked.truncate(top_k);
            PrototypeAllocation {
                index: j,
                name: bank.name(j),
                patch_count: members.len(),
                proportion: if n == 0 { 0.0 } else { members.len() as f64 / n as f64 },
                top_patches: ranked,
            }
        })
        .collect();
    Ok(AllocationReport {
        slide_id: slide_id.to_string(),
        n_patches: n,
        top_k,
        prototypes,
        empty_prototypes: asn.empty_prototypes(),
    })
}
