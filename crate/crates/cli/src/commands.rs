//! The `train`, `eval`, `sweep`, `bench` and `corrupt-preview` subcommands.

use crate::checkpoint::{self, sha256_hex, CheckpointMeta};
use crate::config::{ExperimentConfig, McdoExecutor};
use crate::dataset::load_split;
use rayon::prelude::*;
use serde::Serialize;
use smcdo::bench::{run_bench, LatencyRecord, LATENCY_CSV_COLUMNS};
use smcdo::data::{emit_uncertainty_map, write_pnm, Dataset, Normalization, PnmImage};
use smcdo::eval::{corrupt, csv_header, CalibrationReport, CorruptionKind, CorruptionSpec, Predictor};
use smcdo::graph::{entropy_map, split_at, ModelGraph};
use smcdo::tensor::serialize::LayerWeights;
use smcdo::tensor::Tensor;
use smcdo::train::{build, train, TrainConfig};
use smcdo::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Member `i` trains and initialises from `seed + i`.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    seed.wrapping_add(member as u64)
}

fn dataset_sha(ds: &Dataset) -> String {
    let mut bytes: Vec<u8> = ds.images().data().iter().flat_map(|v| v.to_le_bytes()).collect();
    bytes.extend(ds.position_labels().iter().flat_map(|&l| (l as u64).to_le_bytes()));
    sha256_hex(&bytes)
}

fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn write_results(dir: &Path, reports: &[CalibrationReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv_header() + "\n";
    let mut jsonl = String::new();
    for r in reports {
        csv += &(r.to_csv_row() + "\n");
        jsonl += &(r.to_json() + "\n");
    }
    std::fs::write(dir.join("results.csv"), csv)?;
    std::fs::write(dir.join("results.jsonl"), jsonl)?;
    Ok(())
}

fn config_hash(cfg: &ExperimentConfig, tc: &TrainConfig, member: usize, norm: &Normalization, train_raw: &Dataset) -> String {
    let hashed = serde_json::to_string(&(&cfg.arch, cfg.dropout_mode, tc, member, norm, dataset_sha(train_raw)))
        .expect("config serialises");
    sha256_hex(hashed.as_bytes())
}

fn train_config(cfg: &ExperimentConfig, member: usize, rate_train: f64) -> TrainConfig {
    let mut tc = cfg.train.clone();
    tc.seed = member_seed(cfg.train.seed, member);
    tc.rate_train = rate_train;
    tc
}

fn train_one(
    cfg: &ExperimentConfig,
    train_raw: &Dataset,
    norm: &Normalization,
    member: usize,
    rate_train: f64,
) -> Result<(Vec<LayerWeights>, CheckpointMeta)> {
    let tc = train_config(cfg, member, rate_train);
    let graph = build(&cfg.arch, cfg.dropout(rate_train, rate_train)?, tc.seed)?;
    let normalized = train_raw.with_images(norm.apply(train_raw.images())?)?;
    let outcome = train(&graph, &normalized, None, &tc)?;
    let meta = CheckpointMeta {
        config_hash: config_hash(cfg, &tc, member, norm, train_raw),
        member,
        seed: tc.seed,
        epoch: tc.epochs,
        rate_train,
        arch: cfg.arch.clone(),
        dropout_mode: cfg.dropout_mode,
        normalization: norm.clone(),
        weights_sha256: String::new(),
        metrics: outcome.history.last().cloned(),
        history: outcome.history,
    };
    Ok((outcome.weights, meta))
}

/// Trains every ensemble member; returns the weight file paths.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let train_raw = load_split(&cfg.data, &cfg.data.train, cfg.data.max_train)?;
    let norm = cfg.data.normalization.clone().unwrap_or_else(|| Normalization::from_images(train_raw.images()));
    let mut paths = Vec::new();
    for member in 0..cfg.ensemble_members {
        let (weights, meta) = train_one(cfg, &train_raw, &norm, member, cfg.train.rate_train)?;
        let path = checkpoint_dir(cfg).join(format!("member{member}.bin"));
        checkpoint::save(&path, &weights, meta)?;
        paths.push(path);
    }
    Ok(paths)
}

struct Loaded {
    graph: ModelGraph,
    meta: CheckpointMeta,
}

fn load_members(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<Loaded>> {
    let dir = checkpoint.map_or_else(|| checkpoint_dir(cfg), Path::to_path_buf);
    let mut out = Vec::new();
    for path in checkpoint::discover(&dir)? {
        let (weights, meta) = checkpoint::load(&path)?;
        let graph = checkpoint::instantiate(&weights, &meta, meta.rate_train)?;
        out.push(Loaded { graph, meta });
    }
    let arch = &out[0].meta.arch;
    if out.iter().any(|l| &l.meta.arch != arch) {
        return Err(Error::Data("checkpoints have different architectures".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Model {
    Vanilla,
    DeepEnsemble,
    Mcdo { rate_inf: f64 },
}

fn model_tag(cfg: &ExperimentConfig, model: Model, rate_train: f64, members: usize) -> String {
    match model {
        Model::Vanilla => format!("vanilla_tr{rate_train}"),
        Model::DeepEnsemble => format!("deep_ensemble_m{members}"),
        Model::Mcdo { rate_inf } => format!("mcdo_m{}_tr{rate_train}_inf{rate_inf}", cfg.eval.m),
    }
}

fn condition_id(cond: Option<CorruptionSpec>) -> String {
    cond.map_or_else(|| "clean".to_string(), |c| c.id())
}

/// Corrupted (in `[0,1]` pixel space) then normalised test images.
fn condition_images(cfg: &ExperimentConfig, test_raw: &Dataset, norm: &Normalization, cond: Option<CorruptionSpec>) -> Result<Tensor> {
    let raw = match cond {
        Some(spec) => corrupt(test_raw.images(), spec, cfg.eval.seed)?,
        None => test_raw.images().clone(),
    };
    norm.apply(&raw)
}

fn predict(cfg: &ExperimentConfig, model: Model, members: &[Loaded], images: &Tensor) -> Result<Tensor> {
    let batch = cfg.eval.batch_size;
    match model {
        Model::Vanilla => Predictor::Vanilla(&members[0].graph).predict(images, batch),
        Model::DeepEnsemble => {
            let graphs: Vec<ModelGraph> = members.iter().map(|l| l.graph.clone()).collect();
            Predictor::DeepEnsemble(&graphs).predict(images, batch)
        }
        Model::Mcdo { rate_inf } => {
            let base = &members[0];
            let graph = base.graph.with_dropout(cfg.dropout(base.meta.rate_train, rate_inf)?)?;
            let seed = cfg.eval.seed;
            match cfg.eval.executor {
                McdoExecutor::McdoSequential => Predictor::Mcdo { graph: &graph, samples: cfg.eval.m, seed }.predict(images, batch),
                kind => {
                    let model = split_at(&graph, cfg.eval.m)?;
                    let fused = kind == McdoExecutor::McdoBranchedFused;
                    Predictor::Branched { model: &model, seed, fused }.predict(images, batch)
                }
            }
        }
    }
}

fn eval_models(cfg: &ExperimentConfig, members: usize) -> Vec<Model> {
    let mut models = Vec::new();
    if cfg.eval.include_vanilla {
        models.push(Model::Vanilla);
    }
    if members > 1 {
        models.push(Model::DeepEnsemble);
    }
    models.extend(cfg.eval.rate_inf.iter().map(|&rate_inf| Model::Mcdo { rate_inf }));
    models
}

fn sanitize(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Evaluates vanilla, deep-ensemble (with several members) and MCDO at each
/// inference rate on every condition; writes `results.csv`, `results.jsonl`
/// and, for segmentation, clean-condition entropy maps under `maps/`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<CalibrationReport>> {
    let members = load_members(cfg, checkpoint)?;
    let test_raw = load_split(&cfg.data, &cfg.data.test, cfg.data.max_test)?;
    let norm = members[0].meta.normalization.clone();
    let rate_train = members[0].meta.rate_train;
    let mut reports = Vec::new();
    let models = eval_models(cfg, members.len());
    for cond in cfg.conditions() {
        let images = condition_images(cfg, &test_raw, &norm, cond)?;
        for &model in &models {
            let probs = predict(cfg, model, &members, &images)?;
            let tag = model_tag(cfg, model, rate_train, members.len());
            if cond.is_none() && test_raw.is_segmentation() {
                let dir = cfg.output_dir.join("maps");
                std::fs::create_dir_all(&dir)?;
                let entropy = entropy_map(&probs);
                for i in 0..cfg.eval.maps.min(test_raw.len()) {
                    emit_uncertainty_map(dir.join(format!("{}_{i:03}.pgm", sanitize(&tag))), &entropy, i)?;
                }
            }
            let id = format!("{tag}/{}", condition_id(cond));
            reports.push(CalibrationReport::from_probs(id, cond, &probs, &test_raw, cfg.eval.bins)?);
        }
    }
    write_results(&cfg.output_dir, &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub reports: Vec<CalibrationReport>,
    /// Cells evaluated in this run; the rest were read back from `cells/`.
    pub computed: usize,
    pub reused: usize,
}

#[derive(Serialize)]
struct CellKey<'a> {
    weights: &'a str,
    model: &'a str,
    condition: &'a str,
    m: usize,
    bins: usize,
    executor: McdoExecutor,
    eval_seed: u64,
    batch_size: usize,
    normalization: &'a Normalization,
    test_data: &'a str,
}

/// Reuses `checkpoints/sweep_tr<rate>.bin` when its sidecar hash matches, otherwise trains it.
fn sweep_checkpoint(cfg: &ExperimentConfig, train_raw: &Dataset, norm: &Normalization, rate_train: f64) -> Result<Loaded> {
    let path = checkpoint_dir(cfg).join(format!("sweep_tr{rate_train}.bin"));
    let (weights, meta) = train_one_cached(cfg, train_raw, norm, rate_train, &path)?;
    Ok(Loaded { graph: checkpoint::instantiate(&weights, &meta, rate_train)?, meta })
}

fn train_one_cached(
    cfg: &ExperimentConfig,
    train_raw: &Dataset,
    norm: &Normalization,
    rate_train: f64,
    path: &Path,
) -> Result<(Vec<LayerWeights>, CheckpointMeta)> {
    if path.exists() {
        if let Ok((weights, meta)) = checkpoint::load(path) {
            if meta.config_hash == config_hash(cfg, &train_config(cfg, 0, rate_train), 0, norm, train_raw) {
                return Ok((weights, meta));
            }
        }
    }
    let (weights, meta) = train_one(cfg, train_raw, norm, 0, rate_train)?;
    let meta = checkpoint::save(path, &weights, meta)?;
    Ok((weights, meta))
}

/// Grid over training rates × inference rates × conditions. Each cell is
/// cached under `cells/<hash>.json`; a rerun only evaluates missing cells and
/// rewrites the CSV/JSONL in grid order.
pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>, threads: usize) -> Result<SweepOutcome> {
    let test_raw = load_split(&cfg.data, &cfg.data.test, cfg.data.max_test)?;
    let checkpoints: Vec<Loaded> = match checkpoint {
        Some(path) => {
            let (weights, meta) = checkpoint::load(path)?;
            vec![Loaded { graph: checkpoint::instantiate(&weights, &meta, meta.rate_train)?, meta }]
        }
        None => {
            let train_raw = load_split(&cfg.data, &cfg.data.train, cfg.data.max_train)?;
            let norm = cfg.data.normalization.clone().unwrap_or_else(|| Normalization::from_images(train_raw.images()));
            let rates = cfg.sweep.as_ref().map_or_else(|| vec![cfg.train.rate_train], |s| s.rate_train.clone());
            rates.iter().map(|&r| sweep_checkpoint(cfg, &train_raw, &norm, r)).collect::<Result<_>>()?
        }
    };
    let test_sha = dataset_sha(&test_raw);
    let conditions = cfg.conditions();
    let mut cells = Vec::new();
    for (ci, ckpt) in checkpoints.iter().enumerate() {
        for model in eval_models(cfg, 1) {
            for &cond in &conditions {
                let tag = model_tag(cfg, model, ckpt.meta.rate_train, 1);
                let cond_id = condition_id(cond);
                let key = CellKey {
                    weights: &ckpt.meta.weights_sha256,
                    model: &tag,
                    condition: &cond_id,
                    m: cfg.eval.m,
                    bins: cfg.eval.bins,
                    executor: cfg.eval.executor,
                    eval_seed: cfg.eval.seed,
                    batch_size: cfg.eval.batch_size,
                    normalization: &ckpt.meta.normalization,
                    test_data: &test_sha,
                };
                let hash = sha256_hex(serde_json::to_string(&key).expect("key serialises").as_bytes());
                cells.push((ci, model, cond, format!("{tag}/{cond_id}"), hash));
            }
        }
    }
    let cell_dir = cfg.output_dir.join("cells");
    std::fs::create_dir_all(&cell_dir)?;
    let cached = |hash: &str| -> Option<CalibrationReport> {
        let text = std::fs::read_to_string(cell_dir.join(format!("{hash}.json"))).ok()?;
        serde_json::from_str(&text).ok()
    };
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| cached(&cells[i].4).is_none()).collect();
    // Normalised images per (checkpoint, condition) needed by pending cells.
    let mut images: HashMap<(usize, String), Tensor> = HashMap::new();
    for &i in &pending {
        let (ci, _, cond, _, _) = &cells[i];
        let k = (*ci, condition_id(*cond));
        if !images.contains_key(&k) {
            let t = condition_images(cfg, &test_raw, &checkpoints[*ci].meta.normalization, *cond)?;
            images.insert(k, t);
        }
    }
    let writer = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().try_for_each(|&i| -> Result<()> {
            let (ci, model, cond, id, hash) = &cells[i];
            let x = &images[&(*ci, condition_id(*cond))];
            let probs = predict(cfg, *model, std::slice::from_ref(&checkpoints[*ci]), x)?;
            let report = CalibrationReport::from_probs(id.clone(), *cond, &probs, &test_raw, cfg.eval.bins)?;
            let _guard = writer.lock().expect("writer lock");
            std::fs::write(cell_dir.join(format!("{hash}.json")), report.to_json() + "\n")?;
            Ok(())
        })
    })?;
    let reports = cells
        .iter()
        .map(|c| cached(&c.4).ok_or_else(|| Error::Data(format!("sweep cell {} missing after evaluation", c.3))))
        .collect::<Result<Vec<_>>>()?;
    write_results(&cfg.output_dir, &reports)?;
    Ok(SweepOutcome { computed: pending.len(), reused: cells.len() - pending.len(), reports })
}

/// Latency of each configured executor on the first `bench.batch` test images.
/// Writes `bench.csv` and `bench.jsonl`.
pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<LatencyRecord>> {
    let bench = cfg.bench.as_ref().ok_or_else(|| Error::Config("config has no bench section".into()))?;
    let members = load_members(cfg, checkpoint)?;
    let test_raw = load_split(&cfg.data, &cfg.data.test, Some(bench.batch))?;
    let input = members[0].meta.normalization.apply(test_raw.images())?;
    let base = &members[0];
    let graph = base.graph.with_dropout(cfg.dropout(base.meta.rate_train, cfg.eval.rate_inf[0])?)?;
    let others: Vec<ModelGraph> = members.iter().map(|l| l.graph.clone()).collect();
    let m = bench.m.unwrap_or(cfg.eval.m);
    let records = run_bench(&graph, &others, &input, &bench.harness(), m, cfg.eval.seed)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = LATENCY_CSV_COLUMNS.join(",") + "\n";
    let mut jsonl = String::new();
    for r in &records {
        csv += &(r.to_csv_row() + "\n");
        jsonl += &(serde_json::to_string(r).expect("record serialises") + "\n");
    }
    std::fs::write(cfg.output_dir.join("bench.csv"), csv)?;
    std::fs::write(cfg.output_dir.join("bench.jsonl"), jsonl)?;
    Ok(records)
}

fn to_ppm(images: &Tensor, n: usize) -> Result<PnmImage> {
    let s = images.shape();
    if s.c != 3 {
        return Err(Error::Data("preview needs RGB images".into()));
    }
    let mut pixels = Vec::with_capacity(3 * s.plane());
    for p in 0..s.plane() {
        for c in 0..3 {
            pixels.push((images.plane(n, c)[p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    PnmImage::new(s.w, s.h, 3, pixels)
}

/// Writes the first few test images under every condition as PPM files in `preview/`.
/// Without a configured corruption grid, every kind at every level is shown.
pub fn cmd_corrupt_preview(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let count = cfg.eval.maps.max(1);
    let test_raw = load_split(&cfg.data, &cfg.data.test, Some(count))?;
    let mut conditions = cfg.conditions();
    if cfg.eval.corruptions.kinds.is_empty() {
        for kind in CorruptionKind::ALL {
            conditions.extend((1..=5).map(|level| Some(CorruptionSpec { kind, level })));
        }
    }
    let dir = cfg.output_dir.join("preview");
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for cond in conditions {
        let images = match cond {
            Some(spec) => corrupt(test_raw.images(), spec, cfg.eval.seed)?,
            None => test_raw.images().clone(),
        };
        for i in 0..test_raw.len() {
            let path = dir.join(format!("{}_{i:03}.ppm", condition_id(cond)));
            write_pnm(&path, &to_ppm(&images, i)?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
