use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use proalign::init::{sample_from_slides, sample_training_patches};
use proalign::io::{
    encode_paem, manifest_to_string, parse_manifest, parse_text_bank, read_paem, read_paem_header, read_slide,
    resolve_embedding_path, text_bank_to_string,
};
use proalign::metrics::{aggregate_runs, balanced_accuracy, confusion_matrix, weighted_f1, RunSummary};
use proalign::pfam::{allocation_report, embed_slide, pool_slide, AllocationReport, Pooling};
use proalign::probe::{encode_model, load_model, predict, train_probe, LabeledSet, ProbeConfig, ProbeKind};
use proalign::synth::{generate_synthetic_dataset, sized_text_bank_file, text_bank_of_size, SynthConfig};
use proalign::{
    DatasetManifest, EmbeddingMatrix, Error, PrototypeBank, PrototypeInitConfig, SlideEmbedding, SlideRecord, Split,
};

use crate::args::*;
use crate::bank::{build_bank, load_bank, sidecar_path};
use crate::error::{CliError, CliResult};
use crate::record::{dir_record_path, file_record_path, Recorder};

pub const THREADS_ENV: &str = "PROALIGN_THREADS";

fn resolve_workers(requested: Option<usize>) -> CliResult<usize> {
    if requested == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => return Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => None,
    };
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = requested.unwrap_or(default);
    Ok(cap.map_or(workers, |c| workers.min(c)))
}

fn thread_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Data(format!("cannot start worker pool: {e}")))
}

fn split_of(arg: SplitArg) -> Option<Split> {
    match arg {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn select(manifest: &DatasetManifest, split: SplitArg) -> Vec<&SlideRecord> {
    let want = split_of(split);
    manifest
        .records()
        .iter()
        .filter(|r| want.is_none_or(|s| r.split == s))
        .collect()
}

/// File name for a slide-level artifact; path separators are replaced.
fn file_stem_for(slide_id: &str) -> String {
    slide_id.replace(['/', '\\'], "_")
}

fn dedupe_seeds(seeds: &[u64]) -> CliResult<Vec<u64>> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let mut out: Vec<u64> = Vec::new();
    for &s in seeds {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Checks every header against one common dim (and the bank's, if given)
/// before anything is read or written.
fn check_slide_dims(manifest_path: &Path, records: &[&SlideRecord], expected: Option<usize>) -> CliResult<()> {
    let mut dim = expected;
    for r in records {
        let header = read_paem_header(resolve_embedding_path(manifest_path, r))?;
        let d = header.cols as usize;
        match dim {
            None => dim = Some(d),
            Some(e) if e != d => {
                return Err(Error::DimMismatchAcrossSlides {
                    slide_id: r.slide_id.clone(),
                    expected: e,
                    actual: d,
                }
                .into())
            }
            _ => {}
        }
    }
    Ok(())
}

// --- synth ------------------------------------------------------------------

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_proto: a.n_proto,
        dim: a.dim,
        n_slides: [a.train, a.val, a.test],
        patches_per_slide: (a.min_patches, a.max_patches),
        center_separation: a.separation,
        noise_std: a.noise_std,
        n_classes: a.classes,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    let mut sized = Vec::new();
    for &k in &a.sweep_sizes {
        if !sized.iter().any(|(s, _)| *s == k) {
            sized.push((k, text_bank_of_size(&ds.descriptors, k, a.seed)?));
        }
    }
    let mut rec = Recorder::new("synth", a, vec![a.seed]);
    for (rel, bytes) in ds.encode_files()? {
        rec.write(&a.out.join(rel), &bytes)?;
    }
    for (k, descriptors) in &sized {
        rec.write(&a.out.join(sized_text_bank_file(*k)), text_bank_to_string(descriptors)?.as_bytes())?;
    }
    rec.finish(&dir_record_path(&a.out, "synth"))
}

// --- init-prototypes ----------------------------------------------------------

pub fn init_prototypes(a: &InitArgs) -> CliResult<()> {
    let cfg = PrototypeInitConfig::new(a.n_proto, a.init.patches_per_proto, a.init.seed, a.init.normalize)?;
    let text = match (a.init.method, &a.text_bank) {
        (InitMethod::Text, None) => return Err(CliError::Usage("--method text requires --text-bank".into())),
        (InitMethod::Text, Some(p)) => Some(parse_text_bank(p, a.n_proto)?),
        (InitMethod::Kmeans, _) => None,
    };
    let manifest = parse_manifest(&a.manifest)?;
    let pool = sample_training_patches(&manifest, &a.manifest, &cfg)?;
    let built = build_bank(&pool, a.init.method, a.n_proto, text, a.init.normalize)?;

    let mut rec = Recorder::new("init-prototypes", a, vec![a.init.seed]);
    rec.input(&a.manifest);
    if let Some(p) = &a.text_bank {
        rec.input(p);
    }
    if !pool.shortfalls.is_empty() {
        eprintln!(
            "warning: {} train slide(s) had fewer patches than the per-slide quota of {}; all their patches were used (listed in the sidecar)",
            pool.shortfalls.len(),
            pool.quota
        );
    }
    rec.write(&a.out, &built.matrix_bytes())?;
    rec.write_json(&sidecar_path(&a.out), &built.sidecar)?;
    rec.finish(&file_record_path(&a.out))
}

// --- embed --------------------------------------------------------------------

enum Embedder<'a> {
    Prototypes { bank: &'a PrototypeBank, normalize: bool, top_k: usize },
    Baseline(Pooling),
}

fn embed_one(
    manifest_path: &Path,
    r: &SlideRecord,
    how: &Embedder<'_>,
) -> proalign::Result<(SlideEmbedding, Option<AllocationReport>)> {
    let patches = read_slide(&resolve_embedding_path(manifest_path, r), &r.slide_id)?;
    match how {
        Embedder::Baseline(p) => Ok((pool_slide(&patches, *p, &r.slide_id), None)),
        Embedder::Prototypes { bank, normalize, top_k } => {
            let out = embed_slide(&patches, bank, &r.slide_id, *normalize)?;
            let report = allocation_report(&out.assignment, &out.similarity, bank, *top_k, &r.slide_id)?;
            Ok((out.embedding, Some(report)))
        }
    }
}

fn embedding_bytes(e: &SlideEmbedding) -> proalign::Result<Vec<u8>> {
    Ok(encode_paem(&EmbeddingMatrix::new(1, e.values.len(), e.values.clone())?))
}

pub fn embed(a: &EmbedArgs) -> CliResult<()> {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let workers = resolve_workers(a.workers)?;
    let manifest = parse_manifest(&a.manifest)?;
    let records = select(&manifest, a.split);
    if records.is_empty() {
        return Err(CliError::Data(format!("manifest has no slides in split {:?}", a.split)));
    }
    let loaded = match (&a.baseline, &a.prototypes) {
        (None, Some(p)) => Some(load_bank(p)?),
        _ => None,
    };
    let how = match (a.baseline, &loaded) {
        (Some(Baseline::Mean), _) => Embedder::Baseline(Pooling::Mean),
        (Some(Baseline::Max), _) => Embedder::Baseline(Pooling::Max),
        (None, Some(l)) => Embedder::Prototypes {
            bank: &l.bank,
            normalize: l.normalize,
            top_k: a.top_k,
        },
        (None, None) => return Err(CliError::Usage("--prototypes or --baseline is required".into())),
    };
    check_slide_dims(&a.manifest, &records, loaded.as_ref().map(|l| l.bank.dim()))?;

    let results: Vec<_> = thread_pool(workers)?.install(|| {
        records
            .par_iter()
            .map(|r| embed_one(&a.manifest, r, &how))
            .collect()
    });

    let mut rec = Recorder::new("embed", a, Vec::new());
    rec.input(&a.manifest);
    if let Some(p) = a.prototypes.as_ref().filter(|_| a.baseline.is_none()) {
        rec.input(p);
    }
    let mut done = Vec::new();
    let mut failure: Option<(u8, String)> = None;
    let mut n_failed = 0usize;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok((embedding, report)) => {
                let stem = file_stem_for(&r.slide_id);
                let rel = format!("slides/{stem}.paem");
                rec.write(&a.out_dir.join(&rel), &embedding_bytes(&embedding)?)?;
                if let Some(report) = report {
                    rec.write_json(&a.out_dir.join(format!("alloc/{stem}.json")), &report)?;
                }
                done.push(SlideRecord {
                    embedding_path: rel,
                    ..(*r).clone()
                });
            }
            Err(e) => {
                let msg = format!("slide {}: {e}", r.slide_id);
                eprintln!("error: {msg}");
                rec.error(msg.clone());
                n_failed += 1;
                if failure.is_none() {
                    failure = Some((CliError::Core(e).exit_code(), msg));
                }
            }
        }
    }
    let out_manifest = DatasetManifest::new(done)?;
    rec.write(&a.out_dir.join("manifest.csv"), manifest_to_string(&out_manifest).as_bytes())?;
    rec.finish(&dir_record_path(&a.out_dir, "embed"))?;
    match failure {
        None => Ok(()),
        Some((code, first)) => Err(CliError::Reported(code, format!("{n_failed} slide(s) could not be embedded; first: {first}"))),
    }
}

// --- train / eval ---------------------------------------------------------------

/// Slide embeddings of one split with their labels.
struct FeatureSet {
    features: EmbeddingMatrix,
    labels: Vec<usize>,
}

fn load_features(manifest: &DatasetManifest, manifest_path: &Path, split: SplitArg) -> CliResult<Option<FeatureSet>> {
    let records = select(manifest, split);
    if records.is_empty() {
        return Ok(None);
    }
    check_slide_dims(manifest_path, &records, None)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let m = read_paem(resolve_embedding_path(manifest_path, r))?;
        if m.rows() != 1 {
            return Err(Error::Malformed(format!(
                "slide {} embedding has {} rows, expected 1",
                r.slide_id,
                m.rows()
            ))
            .into());
        }
        rows.push(m.into_data());
    }
    Ok(Some(FeatureSet {
        features: EmbeddingMatrix::from_rows(&rows)?,
        labels: records.iter().map(|r| r.label).collect(),
    }))
}

fn probe_config(p: &ProbeOptions, input_dim: usize, n_classes: usize, seed: u64) -> ProbeConfig {
    let kind = match p.probe {
        ProbeArg::Linear => ProbeKind::Linear,
        ProbeArg::Mlp => ProbeKind::Mlp,
    };
    let mut cfg = ProbeConfig::new(kind, input_dim, n_classes);
    cfg.hidden_dim = p.hidden_dim;
    cfg.learning_rate = p.lr;
    cfg.weight_decay = p.weight_decay;
    cfg.epochs = p.epochs;
    cfg.batch_size = p.batch_size;
    cfg.seed = seed;
    cfg
}

fn model_file(seed: u64) -> String {
    format!("model-seed{seed}.papb")
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let seeds = dedupe_seeds(&a.seeds)?;
    let manifest = parse_manifest(&a.embeddings)?;
    let train = load_features(&manifest, &a.embeddings, SplitArg::Train)?.ok_or(Error::EmptyTrainSplit)?;
    let val = load_features(&manifest, &a.embeddings, SplitArg::Val)?;
    if let Some(v) = &val {
        if v.features.dim() != train.features.dim() {
            return Err(Error::DimMismatch {
                expected: train.features.dim(),
                actual: v.features.dim(),
            }
            .into());
        }
    }
    let n_classes = manifest.n_classes();
    let train_set = LabeledSet::new(&train.features, &train.labels)?;
    let val_set = val.as_ref().map(|v| LabeledSet::new(&v.features, &v.labels)).transpose()?;

    let mut outputs = Vec::new();
    for &seed in &seeds {
        let cfg = probe_config(&a.probe, train.features.dim(), n_classes, seed);
        let (model, log) = train_probe(train_set, val_set, &cfg)?;
        outputs.push((seed, encode_model(&model), log.to_csv()));
    }
    let mut rec = Recorder::new("train", a, seeds);
    rec.input(&a.embeddings);
    for (seed, model, log) in outputs {
        rec.write(&a.out_dir.join(model_file(seed)), &model)?;
        rec.write(&a.out_dir.join(format!("log-seed{seed}.csv")), log.as_bytes())?;
    }
    rec.finish(&dir_record_path(&a.out_dir, "train"))
}

#[derive(Serialize)]
pub struct MetricEntry {
    pub metric: &'static str,
    pub mean_percent: f64,
    pub std_percent: f64,
    /// `mean±std` in percent with two decimals.
    pub summary: String,
    pub per_run: Vec<f64>,
}

#[derive(Serialize)]
pub struct MetricsDoc {
    pub split: SplitArg,
    pub seeds: Vec<u64>,
    pub n_slides: usize,
    pub metrics: Vec<MetricEntry>,
}

fn metric_entry(metric: &'static str, values: Vec<f64>) -> CliResult<MetricEntry> {
    let s: RunSummary = aggregate_runs(&values)?;
    Ok(MetricEntry {
        metric,
        mean_percent: s.mean * 100.0,
        std_percent: s.std * 100.0,
        summary: s.percent(),
        per_run: values,
    })
}

/// Balanced accuracy and weighted F1 per run.
fn score_runs(
    preds: &[Vec<usize>],
    labels: &[usize],
    n_classes: usize,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut bacc = Vec::with_capacity(preds.len());
    let mut f1 = Vec::with_capacity(preds.len());
    for p in preds {
        let cm = confusion_matrix(labels, p, n_classes)?;
        bacc.push(balanced_accuracy(&cm)?);
        f1.push(weighted_f1(&cm)?);
    }
    Ok((bacc, f1))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let seeds = dedupe_seeds(&a.seeds)?;
    let manifest = parse_manifest(&a.embeddings)?;
    let set = load_features(&manifest, &a.embeddings, a.split)?
        .ok_or_else(|| CliError::Data(format!("no slides in split {:?}", a.split)))?;
    let mut rec = Recorder::new("eval", a, seeds.clone());
    rec.input(&a.embeddings);
    let mut preds = Vec::new();
    let mut n_classes = 0;
    for &seed in &seeds {
        let path = a.models_dir.join(model_file(seed));
        let model = load_model(&path)?;
        rec.input(&path);
        n_classes = n_classes.max(model.config.n_classes);
        preds.push(predict(&model, &set.features)?);
    }
    let (bacc, f1) = score_runs(&preds, &set.labels, n_classes)?;
    let doc = MetricsDoc {
        split: a.split,
        seeds,
        n_slides: set.labels.len(),
        metrics: vec![metric_entry("balanced_accuracy", bacc)?, metric_entry("weighted_f1", f1)?],
    };
    rec.write_json(&a.out, &doc)?;
    rec.finish(&file_record_path(&a.out))
}

// --- sweep ----------------------------------------------------------------------

fn dedupe_counts(list: &[usize]) -> CliResult<Vec<usize>> {
    if list.is_empty() {
        return Err(CliError::Usage("--n-proto-list is empty".into()));
    }
    let mut out: Vec<usize> = Vec::new();
    for &k in list {
        if k == 0 {
            return Err(CliError::Usage("prototype counts must be positive".into()));
        }
        if out.contains(&k) {
            eprintln!("warning: duplicate prototype count {k} ignored");
        } else {
            out.push(k);
        }
    }
    Ok(out)
}

struct SweepRow {
    n_proto: usize,
    bacc: RunSummary,
    f1: RunSummary,
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let counts = dedupe_counts(&a.n_proto_list)?;
    let seeds = dedupe_seeds(&a.seeds)?;
    let workers = resolve_workers(a.workers)?;
    let mut configs = Vec::with_capacity(counts.len());
    for &k in &counts {
        configs.push(PrototypeInitConfig::new(k, a.init.patches_per_proto, a.init.seed, a.init.normalize)?);
    }
    let manifest = parse_manifest(&a.manifest)?;
    let all: Vec<&SlideRecord> = manifest.records().iter().collect();
    check_slide_dims(&a.manifest, &all, None)?;
    let texts = match (a.init.method, &a.text_bank_dir) {
        (InitMethod::Text, None) => return Err(CliError::Usage("--method text requires --text-bank-dir".into())),
        (InitMethod::Text, Some(dir)) => counts
            .iter()
            .map(|&k| Ok(Some(parse_text_bank(dir.join(sized_text_bank_file(k)), k)?)))
            .collect::<CliResult<Vec<_>>>()?,
        (InitMethod::Kmeans, _) => vec![None; counts.len()],
    };
    let pool = thread_pool(workers)?;
    let slides: Vec<EmbeddingMatrix> = pool.install(|| {
        all.par_iter()
            .map(|r| read_slide(&resolve_embedding_path(&a.manifest, r), &r.slide_id))
            .collect::<proalign::Result<_>>()
    })?;
    let train_slides: Vec<(String, EmbeddingMatrix)> = all
        .iter()
        .zip(&slides)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(r, m)| (r.slide_id.clone(), m.clone()))
        .collect();
    let n_classes = manifest.n_classes();
    let labels_of = |s: Split| -> Vec<usize> { all.iter().filter(|r| r.split == s).map(|r| r.label).collect() };
    let (train_labels, val_labels, test_labels) = (labels_of(Split::Train), labels_of(Split::Val), labels_of(Split::Test));
    if test_labels.is_empty() {
        return Err(CliError::Data("sweep needs a non-empty test split".into()));
    }

    let mut rows = Vec::with_capacity(counts.len());
    for ((&k, cfg), text) in counts.iter().zip(&configs).zip(texts) {
        let sample = sample_from_slides(&train_slides, cfg)?;
        let built = build_bank(&sample, a.init.method, k, text, a.init.normalize)?;
        let bank = &built.bank;
        let embeddings: Vec<SlideEmbedding> = pool.install(|| {
            all.par_iter()
                .zip(&slides)
                .map(|(r, m)| Ok(embed_slide(m, bank, &r.slide_id, a.init.normalize)?.embedding))
                .collect::<proalign::Result<_>>()
        })?;
        let stack = |s: Split| -> proalign::Result<Option<EmbeddingMatrix>> {
            let picked: Vec<&[f32]> = all
                .iter()
                .zip(&embeddings)
                .filter(|(r, _)| r.split == s)
                .map(|(_, e)| e.values.as_slice())
                .collect();
            if picked.is_empty() {
                Ok(None)
            } else {
                EmbeddingMatrix::from_rows(&picked).map(Some)
            }
        };
        let train_x = stack(Split::Train)?.ok_or(Error::EmptyTrainSplit)?;
        let val_x = stack(Split::Val)?;
        let test_x = stack(Split::Test)?.expect("checked non-empty above");
        let train_set = LabeledSet::new(&train_x, &train_labels)?;
        let val_set = val_x.as_ref().map(|v| LabeledSet::new(v, &val_labels)).transpose()?;
        let preds: Vec<Vec<usize>> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = probe_config(&a.probe, train_x.dim(), n_classes, seed);
                    let (model, _) = train_probe(train_set, val_set, &cfg)?;
                    predict(&model, &test_x)
                })
                .collect::<proalign::Result<_>>()
        })?;
        let (bacc, f1) = score_runs(&preds, &test_labels, n_classes)?;
        let row = SweepRow {
            n_proto: k,
            bacc: aggregate_runs(&bacc)?,
            f1: aggregate_runs(&f1)?,
        };
        eprintln!("n_proto={k}: balanced accuracy {}, weighted F1 {}", row.bacc.percent(), row.f1.percent());
        rows.push(row);
    }

    let mut csv = String::from(
        "n_proto,balanced_accuracy,weighted_f1,balanced_accuracy_mean,balanced_accuracy_std,weighted_f1_mean,weighted_f1_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.n_proto,
            r.bacc.percent(),
            r.f1.percent(),
            r.bacc.mean * 100.0,
            r.bacc.std * 100.0,
            r.f1.mean * 100.0,
            r.f1.std * 100.0
        ));
    }
    let mut rec = Recorder::new("sweep", a, seeds);
    rec.input(&a.manifest);
    if let Some(d) = &a.text_bank_dir {
        rec.input(d);
    }
    rec.write(&a.out_dir.join("sweep.csv"), csv.as_bytes())?;
    rec.finish(&dir_record_path(&a.out_dir, "sweep"))
}

// --- allocmap -------------------------------------------------------------------

pub fn allocmap(a: &AllocmapArgs) -> CliResult<()> {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let slide_id = a.slide_id.clone().unwrap_or_else(|| {
        a.slide
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let loaded = load_bank(&a.prototypes)?;
    let header = read_paem_header(&a.slide)?;
    if header.cols as usize != loaded.bank.dim() {
        return Err(Error::DimMismatch {
            expected: loaded.bank.dim(),
            actual: header.cols as usize,
        }
        .into());
    }
    let patches = read_slide(&a.slide, &slide_id)?;
    let out = embed_slide(&patches, &loaded.bank, &slide_id, loaded.normalize)?;
    let report = allocation_report(&out.assignment, &out.similarity, &loaded.bank, a.top_k, &slide_id)?;
    let mut rec = Recorder::new("allocmap", a, Vec::new());
    rec.input(&a.slide);
    rec.input(&a.prototypes);
    rec.write_json(&a.out, &report)?;
    rec.finish(&file_record_path(&a.out))
}

