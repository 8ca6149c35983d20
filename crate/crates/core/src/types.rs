//! Domain types shared across the pipeline.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;

/// Name, description and text embedding of one prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeDescriptor {
    pub index: usize,
    pub name: String,
    pub description: String,
    #[serde(rename = "embedding")]
    pub text_embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BankStage {
    Initial,
    /// Refined for the slide with this id.
    Refined { slide_id: String },
}

/// Prototype matrix `P` (initial) or `P'` (refined for one slide).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    stage: BankStage,
    matrix: EmbeddingMatrix,
    descriptors: Option<Vec<PrototypeDescriptor>>,
    /// Pool row that seeded each prototype, when the bank came from
    /// patch-text contrast.
    anchors: Option<Vec<usize>>,
}

impl PrototypeBank {
    pub fn initial(
        matrix: EmbeddingMatrix,
        descriptors: Option<Vec<PrototypeDescriptor>>,
    ) -> Result<Self> {
        if let Some(d) = &descriptors {
            check_descriptors(d, matrix.rows(), matrix.dim())?;
        }
        Ok(Self {
            stage: BankStage::Initial,
            matrix,
            descriptors,
            anchors: None,
        })
    }

    pub fn with_anchors(mut self, anchors: Vec<usize>) -> Result<Self> {
        if anchors.len() != self.n_proto() {
            return Err(Error::CountMismatch {
                expected: self.n_proto(),
                actual: anchors.len(),
            });
        }
        self.anchors = Some(anchors);
        Ok(self)
    }

    /// Refined counterpart of `self` for `slide_id`, carrying descriptors over.
    pub(crate) fn refined(&self, matrix: EmbeddingMatrix, slide_id: &str) -> Self {
        debug_assert_eq!(matrix.rows(), self.matrix.rows());
        Self {
            stage: BankStage::Refined {
                slide_id: slide_id.to_string(),
            },
            matrix,
            descriptors: self.descriptors.clone(),
            anchors: self.anchors.clone(),
        }
    }

    pub fn stage(&self) -> &BankStage {
        &self.stage
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn descriptors(&self) -> Option<&[PrototypeDescriptor]> {
        self.descriptors.as_deref()
    }

    pub fn anchors(&self) -> Option<&[usize]> {
        self.anchors.as_deref()
    }

    pub fn n_proto(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn prototype(&self, j: usize) -> &[f32] {
        self.matrix.row(j)
    }

    /// Display name of prototype `j`, falling back to `proto-j`.
    pub fn name(&self, j: usize) -> String {
        self.descriptors
            .as_ref()
            .map(|d| d[j].name.clone())
            .unwrap_or_else(|| format!("proto-{j}"))
    }
}

pub(crate) fn check_descriptors(
    descriptors: &[PrototypeDescriptor],
    rows: usize,
    dim: usize,
) -> Result<()> {
    if descriptors.len() != rows {
        return Err(Error::CountMismatch {
            expected: rows,
            actual: descriptors.len(),
        });
    }
    for (i, d) in descriptors.iter().enumerate() {
        if d.index != i {
            return Err(Error::IndexGap(i));
        }
        if d.text_embedding.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: d.text_embedding.len(),
            });
        }
    }
    Ok(())
}

/// Hard assignment of each patch to its most similar prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap {
    pub patch_to_proto: Vec<usize>,
    pub best_similarity: Vec<f64>,
    /// `A_j`: member patch indices of prototype `j`, ascending.
    pub proto_members: Vec<Vec<usize>>,
}

impl AssignmentMap {
    pub fn n_patches(&self) -> usize {
        self.patch_to_proto.len()
    }

    pub fn n_proto(&self) -> usize {
        self.proto_members.len()
    }

    pub fn empty_prototypes(&self) -> Vec<usize> {
        self.proto_members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_empty())
            .map(|(j, _)| j)
            .collect()
    }
}

/// Concatenation of the refined prototypes of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideEmbedding {
    pub slide_id: String,
    pub n_proto: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl SlideEmbedding {
    pub fn block(&self, j: usize) -> &[f32] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub embedding_path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<SlideRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SlideRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.slide_id.as_str()) {
                return Err(Error::DuplicateSlideId(r.slide_id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[SlideRecord] {
        &self.records
    }

    /// `C`: one more than the largest label.
    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SlideRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Settings for building the initial prototype bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeInitConfig {
    pub n_proto: usize,
    pub n_patch_per_proto: usize,
    pub n_total: usize,
    pub seed: u64,
    pub normalize: bool,
}

impl PrototypeInitConfig {
    pub fn new(n_proto: usize, n_patch_per_proto: usize, seed: u64, normalize: bool) -> Result<Self> {
        if n_proto == 0 || n_patch_per_proto == 0 {
            return Err(Error::BadConfig(
                "n_proto and n_patch_per_proto must be positive".into(),
            ));
        }
        let n_total = n_proto
            .checked_mul(n_patch_per_proto)
            .ok_or_else(|| Error::BadConfig("n_total overflows".into()))?;
        Ok(Self {
            n_proto,
            n_patch_per_proto,
            n_total,
            seed,
            normalize,
        })
    }
}

impl Default for PrototypeInitConfig {
    fn default() -> Self {
        Self::new(16, 100_000, 0, false).expect("defaults are valid")
    }
}
