//! Prototype bank files: a PAEM matrix plus a JSON sidecar.
//!
//! The sidecar lists descriptors under `prototypes`, so it also parses as a
//! text bank.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use proalign::init::{
    init_from_text, kmeans_init, PatchSamplePool, Shortfall, KMEANS_MAX_ITERS, KMEANS_TOL,
};
use proalign::io::{encode_paem, read_paem};
use proalign::{Error, PrototypeBank, PrototypeDescriptor, EmbeddingMatrix};

use crate::args::InitMethod;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Anchor {
    pub index: usize,
    pub pool_row: usize,
    pub slide_id: String,
    pub row: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KMeansInfo {
    pub iterations: usize,
    pub converged: bool,
    pub final_inertia: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankSidecar {
    pub method: InitMethod,
    pub normalize: bool,
    pub seed: u64,
    pub pool_rows: usize,
    pub pool_quota: usize,
    pub shortfalls: Vec<Shortfall>,
    pub anchors: Option<Vec<Anchor>>,
    pub kmeans: Option<KMeansInfo>,
    pub prototypes: Vec<PrototypeDescriptor>,
}

pub fn sidecar_path(bank_path: &Path) -> PathBuf {
    bank_path.with_extension("json")
}

pub struct BuiltBank {
    pub bank: PrototypeBank,
    pub sidecar: BankSidecar,
}

impl BuiltBank {
    pub fn matrix_bytes(&self) -> Vec<u8> {
        encode_paem(self.bank.matrix())
    }
}

/// Builds a bank from a sampled pool with either initialization method.
pub fn build_bank(
    pool: &PatchSamplePool,
    method: InitMethod,
    n_proto: usize,
    text: Option<(Vec<PrototypeDescriptor>, EmbeddingMatrix)>,
    normalize: bool,
) -> CliResult<BuiltBank> {
    let (bank, anchors, kmeans) = match method {
        InitMethod::Text => {
            let (descriptors, texts) =
                text.ok_or_else(|| CliError::Usage("--method text needs a text bank".into()))?;
            let bank = init_from_text(&pool.matrix, &texts, descriptors, normalize)?;
            let anchors = bank.anchors().map(|a| {
                a.iter()
                    .enumerate()
                    .map(|(j, &i)| Anchor {
                        index: j,
                        pool_row: i,
                        slide_id: pool.provenance[i].slide_id.clone(),
                        row: pool.provenance[i].row,
                    })
                    .collect()
            });
            (bank, anchors, None)
        }
        InitMethod::Kmeans => {
            let pool_matrix = if normalize {
                proalign::l2_normalize_rows(&pool.matrix).matrix
            } else {
                pool.matrix.clone()
            };
            let km = kmeans_init(&pool_matrix, n_proto, pool.seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
            let info = KMeansInfo {
                iterations: km.iterations,
                converged: km.converged,
                final_inertia: km.inertia.last().copied().unwrap_or(0.0),
            };
            (km.bank, None, Some(info))
        }
    };
    let prototypes = bank.descriptors().map(<[_]>::to_vec).unwrap_or_default();
    Ok(BuiltBank {
        sidecar: BankSidecar {
            method,
            normalize,
            seed: pool.seed,
            pool_rows: pool.matrix.rows(),
            pool_quota: pool.quota,
            shortfalls: pool.shortfalls.clone(),
            anchors,
            kmeans,
            prototypes,
        },
        bank,
    })
}

pub struct LoadedBank {
    pub bank: PrototypeBank,
    pub normalize: bool,
}

/// Reads a bank matrix and, when present, its sidecar.
pub fn load_bank(path: &Path) -> CliResult<LoadedBank> {
    let matrix = read_paem(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(LoadedBank {
            bank: PrototypeBank::initial(matrix, None)?,
            normalize: false,
        });
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: BankSidecar = serde_json::from_str(&text).map_err(Error::from)?;
    let descriptors = (!sidecar.prototypes.is_empty()).then_some(sidecar.prototypes);
    Ok(LoadedBank {
        bank: PrototypeBank::initial(matrix, descriptors)?,
        normalize: sidecar.normalize,
    })
}
