//! On-disk formats: PAEM matrices, manifest CSV, text banks, and split
//! generation.
//!
//! PAEM layout (all little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `PAEM`               |
//! | 4      | 4    | version `u32` = 1          |
//! | 8      | 4    | dtype `u32` = 1 (`f32`)    |
//! | 12     | 8    | rows `u64`                 |
//! | 20     | 8    | cols `u64`                 |
//! | 28     | 4·rows·cols | row-major `f32` payload |
//!
//! The header is 28 bytes on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;
use crate::types::{DatasetManifest, PrototypeDescriptor, SlideRecord, Split};

pub const PAEM_MAGIC: [u8; 4] = *b"PAEM";
pub const PAEM_VERSION: u32 = 1;
pub const PAEM_DTYPE_F32: u32 = 1;
pub const PAEM_HEADER_LEN: usize = 28;

/// Serializes raw parts without validating them, so tests and tools can
/// produce degenerate files (for example zero-row slides).
pub fn encode_paem_raw(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAEM_HEADER_LEN + 4 * data.len());
    out.extend_from_slice(&PAEM_MAGIC);
    out.extend_from_slice(&PAEM_VERSION.to_le_bytes());
    out.extend_from_slice(&PAEM_DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_paem(m: &EmbeddingMatrix) -> Vec<u8> {
    encode_paem_raw(m.rows(), m.dim(), m.data())
}

/// Parsed PAEM header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaemHeader {
    pub rows: u64,
    pub cols: u64,
}

impl PaemHeader {
    pub fn payload_len(&self) -> u64 {
        self.rows.saturating_mul(self.cols).saturating_mul(4)
    }
}

pub fn decode_paem_header(bytes: &[u8]) -> Result<PaemHeader> {
    if bytes.len() >= 4 && bytes[..4] != PAEM_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            found,
            expected: PAEM_MAGIC,
        });
    }
    if bytes.len() < PAEM_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: PAEM_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != PAEM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = u32_at(8);
    if dtype != PAEM_DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    Ok(PaemHeader {
        rows: u64_at(12),
        cols: u64_at(20),
    })
}

pub fn decode_paem(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let header = decode_paem_header(bytes)?;
    let payload = &bytes[PAEM_HEADER_LEN..];
    let expected = header.payload_len();
    if (payload.len() as u64) < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after PAEM payload",
            payload.len() as u64 - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(header.rows as usize, header.cols as usize, data)
}

pub fn write_paem(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_paem(m))
}

pub fn read_paem(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    decode_paem(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads only the header; used to check dims before loading payloads.
pub fn read_paem_header(path: impl AsRef<Path>) -> Result<PaemHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(PAEM_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(PAEM_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_paem_header(&buf)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// --- manifest ---------------------------------------------------------------

pub const MANIFEST_COLUMNS: [&str; 4] = ["slide_id", "embedding_path", "label", "split"];

pub fn parse_manifest_str(text: &str) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |k: usize| -> Result<&str> {
            row.get(cols[k])
                .map(str::trim)
                .ok_or_else(|| Error::MissingColumn(MANIFEST_COLUMNS[k].to_string()))
        };
        let label_text = field(2)?;
        records.push(SlideRecord {
            slide_id: field(0)?.to_string(),
            embedding_path: field(1)?.to_string(),
            label: label_text
                .parse()
                .map_err(|_| Error::BadLabel(label_text.to_string()))?,
            split: field(3)?.parse()?,
        });
    }
    DatasetManifest::new(records)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut out = MANIFEST_COLUMNS.join(",");
    out.push('\n');
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in manifest.records() {
        w.write_record([
            r.slide_id.as_str(),
            r.embedding_path.as_str(),
            &r.label.to_string(),
            r.split.as_str(),
        ])
        .expect("writing to memory");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).unwrap());
    out
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), manifest_to_string(manifest).as_bytes())
}

/// Resolves a record's embedding path relative to the manifest's directory.
pub fn resolve_embedding_path(manifest_path: &Path, record: &SlideRecord) -> PathBuf {
    let p = Path::new(&record.embedding_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(p)
    }
}

/// Loads one slide's patch matrix; a zero-row file is [`Error::EmptySlide`].
pub fn read_slide(path: &Path, slide_id: &str) -> Result<EmbeddingMatrix> {
    match read_paem(path) {
        Err(Error::EmptyMatrix { rows: 0, .. }) => Err(Error::EmptySlide(slide_id.to_string())),
        other => other,
    }
}

// --- text bank --------------------------------------------------------------

/// JSON text bank: `{"prototypes": [{"index", "name", "description",
/// "embedding"}, ...]}`. Extra fields are ignored, so prototype-bank sidecars
/// can be read back as text banks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextBankDoc {
    pub prototypes: Vec<PrototypeDescriptor>,
}

/// Parses a text bank and stacks the embeddings into `T_proto`.
pub fn parse_text_bank_str(
    text: &str,
    expected_n_proto: usize,
) -> Result<(Vec<PrototypeDescriptor>, EmbeddingMatrix)> {
    let doc: TextBankDoc = serde_json::from_str(text)?;
    let mut descriptors = doc.prototypes;
    if descriptors.len() != expected_n_proto {
        return Err(Error::CountMismatch {
            expected: expected_n_proto,
            actual: descriptors.len(),
        });
    }
    descriptors.sort_by_key(|d| d.index);
    for (i, d) in descriptors.iter().enumerate() {
        if d.index != i {
            return Err(Error::IndexGap(i));
        }
    }
    let dim = descriptors.first().map_or(0, |d| d.text_embedding.len());
    for d in &descriptors {
        if d.text_embedding.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: d.text_embedding.len(),
            });
        }
    }
    let rows: Vec<&[f32]> = descriptors
        .iter()
        .map(|d| d.text_embedding.as_slice())
        .collect();
    let matrix = EmbeddingMatrix::from_rows(&rows)?;
    Ok((descriptors, matrix))
}

pub fn parse_text_bank(
    path: impl AsRef<Path>,
    expected_n_proto: usize,
) -> Result<(Vec<PrototypeDescriptor>, EmbeddingMatrix)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_bank_str(&text, expected_n_proto)
}

/// Number of prototypes listed in a text bank, without validating it.
pub fn text_bank_len(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: TextBankDoc = serde_json::from_str(&text)?;
    Ok(doc.prototypes.len())
}

/// Pretty JSON with a trailing newline.
pub fn text_bank_to_string(descriptors: &[PrototypeDescriptor]) -> Result<String> {
    let doc = TextBankDoc {
        prototypes: descriptors.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn write_text_bank(descriptors: &[PrototypeDescriptor], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), text_bank_to_string(descriptors)?.as_bytes())
}

// --- splits -----------------------------------------------------------------

/// Stratified seeded split assignment.
///
/// Per class (ascending label), ids are sorted, shuffled with a ChaCha8 stream
/// seeded by `seed`, then cut contiguously at the ratio boundaries. Sizes are
/// `floor(n * r)` with the remainder going to train, then val, then test
/// (splits with ratio 0 never receive slides). A requested split left empty
/// by rounding borrows one slide from the largest split.
pub fn make_splits(
    items: &[(String, usize)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::BadRatios(ratios));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, label) in items {
        by_class.entry(*label).or_default().push(id);
    }
    let requested = ratios.iter().filter(|r| **r > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (label, mut ids) in by_class {
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < requested {
            return Err(Error::TooFewSlides {
                label,
                available: ids.len(),
                required: requested,
            });
        }
        ids.shuffle(&mut rng);
        let sizes = split_sizes(ids.len(), ratios);
        let mut cursor = 0;
        for (split, size) in Split::ALL.into_iter().zip(sizes) {
            for id in &ids[cursor..cursor + size] {
                out.insert(id.to_string(), split);
            }
            cursor += size;
        }
    }
    Ok(out)
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut sizes = ratios.map(|r| (n as f64 * r).floor() as usize);
    let mut remainder = n - sizes.iter().sum::<usize>();
    while remainder > 0 {
        for k in 0..3 {
            if remainder > 0 && ratios[k] > 0.0 {
                sizes[k] += 1;
                remainder -= 1;
            }
        }
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && sizes[k] == 0 {
            let donor = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap();
            sizes[donor] -= 1;
            sizes[k] += 1;
        }
    }
    sizes
}
