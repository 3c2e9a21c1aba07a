//! On-disk pipeline stages behind the command-line tool.
//!
//! A data directory holds `heatmaps/*.hmp`, `graphs/*.mgf`, `labels.csv`
//! and `roster.csv`. Every stage writes a `manifest.json` next to its
//! outputs listing SHA-256 hashes; wall-clock timings live only there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::build_graph;
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::eval::{bootstrap, bootstrap_kappa, consensus, pathologist_kappa, EvalReport, ReportRow};
use crate::format::checkpoint::{read_checkpoint, write_checkpoint};
use crate::format::hmp::{read_heatmap, write_heatmap};
use crate::format::labels::{read_labels, write_labels, LabelTable};
use crate::format::mgf::{read_graph, write_graph};
use crate::graph::{split_by_patient, DatasetSplit, Endpoint, Modality, PairedSample};
use crate::model::{Model, PreparedPair};
use crate::synth::{generate_dataset, graph_seed};
use crate::train::{grid_search, train, GridOutcome, TrainConfig, TrainOutcome, Trial};

pub const MANIFEST: &str = "manifest.json";
pub const BASELINE_MODEL: &str = "pathologists";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub checkpoint: Option<String>,
    pub reports: Vec<String>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &AppConfig) -> Self {
        RunManifest {
            command: command.into(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint: None,
            reports: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Output hashes keyed by relative path.
    pub fn output_hashes(&self) -> BTreeMap<&str, &str> {
        self.outputs.iter().map(|f| (f.path.as_str(), f.sha256.as_str())).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes `files`, recording paths relative to `base`.
fn hash_files(base: &Path, files: &[PathBuf]) -> Result<Vec<FileHash>> {
    files
        .par_iter()
        .map(|f| {
            Ok(FileHash {
                path: f.strip_prefix(base).unwrap_or(f).to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(f)?,
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn heatmaps(&self) -> PathBuf {
        self.root.join("heatmaps")
    }

    pub fn graphs(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.csv")
    }

    pub fn roster(&self) -> PathBuf {
        self.root.join("roster.csv")
    }
}

/// File stem for one modality of a sample.
pub fn stem(sample_id: &str, m: Modality) -> String {
    format!("{sample_id}_{}", suffix(m))
}

fn suffix(m: Modality) -> &'static str {
    match m {
        Modality::A => "a",
        Modality::B => "b",
    }
}

/// Modality from a file stem suffix, falling back to the class count.
fn modality_of(stem: &str, classes: usize) -> Option<Modality> {
    if stem.ends_with("_a") {
        Some(Modality::A)
    } else if stem.ends_with("_b") {
        Some(Modality::B)
    } else {
        [Modality::A, Modality::B].into_iter().find(|m| m.classes() == classes)
    }
}

/// Writes a synthetic dataset with heatmaps, graphs, labels and roster.
pub fn cmd_generate(cfg: &AppConfig, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let layout = DataLayout::new(out);
    create_dir(&layout.heatmaps())?;
    create_dir(&layout.graphs())?;
    let data = generate_dataset(&cfg.generator, cfg.seed)?;
    let t_gen = elapsed_ms(t0);

    let mut files: Vec<PathBuf> = data
        .samples
        .par_iter()
        .map(|s| {
            let id = s.key.id();
            let pa = layout.heatmaps().join(format!("{}.hmp", stem(&id, Modality::A)));
            let pb = layout.heatmaps().join(format!("{}.hmp", stem(&id, Modality::B)));
            write_heatmap(&s.heatmap_a, &pa)?;
            write_heatmap(&s.heatmap_b, &pb)?;
            Ok(vec![pa, pb])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let t1 = Instant::now();
    let pairs = data.build_pairs(&cfg.graph, cfg.seed)?;
    for p in &pairs {
        for g in [&p.graph_a, &p.graph_b] {
            let path = layout.graphs().join(format!("{}.mgf", stem(&p.id(), g.modality)));
            write_graph(g, &path)?;
            files.push(path);
        }
    }
    let t_graphs = elapsed_ms(t1);
    write_labels(&data.labels(), &layout.labels())?;
    files.push(layout.labels());
    let mut roster = String::from("patient_id,sample_id\n");
    for s in &data.samples {
        roster.push_str(&format!("{},{}\n", s.key.patient_id, s.key.id()));
    }
    write_text(&layout.roster(), &roster)?;
    files.push(layout.roster());
    files.sort();

    let mut m = RunManifest::new("generate", cfg);
    m.outputs = hash_files(out, &files)?;
    m.timings_ms.insert("generate".into(), t_gen);
    m.timings_ms.insert("build_graphs".into(), t_graphs);
    m.timings_ms.insert("total".into(), elapsed_ms(t0));
    m.write(out)?;
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildSummary {
    pub built: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl std::fmt::Display for BuildSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "built {} skipped {} failed {}", self.built, self.skipped, self.failed)
    }
}

enum BuildResult {
    Built(PathBuf),
    Skipped,
    Failed,
}

/// Builds one graph per `.hmp` file in `input`. Heatmaps without usable
/// tissue are skipped; unreadable or invalid files count as failures. Both
/// are logged and the remaining files are still processed.
pub fn cmd_build_graphs(cfg: &AppConfig, input: &Path, out: &Path) -> Result<(BuildSummary, RunManifest)> {
    let t0 = Instant::now();
    cfg.graph.validate()?;
    create_dir(out)?;
    let sources = list_files(input, "hmp")?;
    let results: Vec<BuildResult> = sources
        .par_iter()
        .map(|src| {
            let stem = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let outcome = read_heatmap(src).and_then(|hm| {
                let m = modality_of(&stem, hm.classes())
                    .ok_or_else(|| Error::Validation(format!("cannot tell the modality of {stem}")))?;
                build_graph(&hm, m, &cfg.graph, graph_seed(cfg.seed, &stem))
            });
            match outcome {
                Ok(g) => {
                    let dst = out.join(format!("{stem}.mgf"));
                    match write_graph(&g, &dst) {
                        Ok(()) => BuildResult::Built(dst),
                        Err(e) => {
                            log::error!("{}: {e}", dst.display());
                            BuildResult::Failed
                        }
                    }
                }
                Err(Error::EmptyTissue) => {
                    log::warn!("{}: no usable tissue, skipped", src.display());
                    BuildResult::Skipped
                }
                Err(e) => {
                    log::error!("{}: {e}", src.display());
                    BuildResult::Failed
                }
            }
        })
        .collect();
    let mut summary = BuildSummary::default();
    let mut built = Vec::new();
    for r in results {
        match r {
            BuildResult::Built(p) => {
                summary.built += 1;
                built.push(p);
            }
            BuildResult::Skipped => summary.skipped += 1,
            BuildResult::Failed => summary.failed += 1,
        }
    }
    let mut m = RunManifest::new("build-graphs", cfg);
    m.inputs = hash_files(input, &sources)?;
    m.outputs = hash_files(out, &built)?;
    m.timings_ms.insert("total".into(), elapsed_ms(t0));
    m.write(out)?;
    Ok((summary, m))
}

/// Pairs graphs with labels. Samples missing either graph are dropped with a
/// warning; with `endpoint` set, samples without labels for it are dropped.
pub fn load_samples(data: &Path, endpoint: Option<Endpoint>) -> Result<Vec<PairedSample>> {
    let layout = DataLayout::new(data);
    let labels: LabelTable = read_labels(&layout.labels())?;
    let gdir = layout.graphs();
    let wanted: Vec<_> = labels
        .into_iter()
        .filter(|(_, ls)| endpoint.is_none_or(|e| ls.iter().any(|l| l.endpoint == e)))
        .collect();
    let loaded: Vec<Option<PairedSample>> = wanted
        .into_par_iter()
        .map(|(key, ls)| {
            let id = key.id();
            let pa = gdir.join(format!("{}.mgf", stem(&id, Modality::A)));
            let pb = gdir.join(format!("{}.mgf", stem(&id, Modality::B)));
            if !pa.exists() || !pb.exists() {
                log::warn!("sample {id} lacks a graph, dropped");
                return Ok(None);
            }
            let s = PairedSample {
                key,
                graph_a: read_graph(&pa)?,
                graph_b: read_graph(&pb)?,
                labels: ls,
            };
            s.validate()?;
            Ok(Some(s))
        })
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().flatten().collect())
}

fn graph_and_label_files(data: &Path) -> Result<Vec<PathBuf>> {
    let layout = DataLayout::new(data);
    let mut files = list_files(&layout.graphs(), "mgf")?;
    files.push(layout.labels());
    files.sort();
    Ok(files)
}

pub struct Leaderboard {
    pub trials: Vec<Trial>,
    pub best: usize,
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub split: DatasetSplit,
    pub leaderboard: Option<Leaderboard>,
    pub manifest: RunManifest,
}

fn leaderboard_csv(g: &Leaderboard) -> String {
    let mut s = String::from("trial,strategy,conv_layers,hidden,head_layers,head_dropout,lr,best_val_loss,best_iteration,diverged,selected\n");
    for t in &g.trials {
        let hs = t.model.head_spec();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.10},{},{},{}\n",
            t.index,
            t.model.label(),
            t.model.conv_layers,
            t.model.hidden,
            hs.layers,
            hs.dropout,
            t.lr,
            t.best_val_loss,
            t.best_iteration,
            t.diverged,
            t.index == g.best
        ));
    }
    s
}

/// Splits by patient, trains (or grid-searches when grid axes are set) and
/// writes `model.ckpt`, `trace.csv`, `split.json` and, for grids,
/// `leaderboard.csv`.
pub fn cmd_train(cfg: &AppConfig, data: &Path, out: &Path) -> Result<TrainRun> {
    let t0 = Instant::now();
    cfg.validate()?;
    create_dir(out)?;
    let samples = load_samples(data, Some(cfg.train.endpoint))?;
    let keys: Vec<_> = samples.iter().map(|s| s.key.clone()).collect();
    let split = split_by_patient(&keys, cfg.split.fractions(), cfg.seed)?;
    let tcfg = TrainConfig {
        seed: cfg.train_seed(),
        ..cfg.train.clone()
    };
    let (outcome, grid) = if tcfg.grid.is_empty() {
        (train(&cfg.model, &tcfg, &samples, &split)?, None)
    } else {
        let GridOutcome {
            leaderboard,
            best,
            outcome,
        } = grid_search(&cfg.model, &tcfg, &samples, &split)?;
        (outcome, Some(Leaderboard { trials: leaderboard, best }))
    };
    let t_train = elapsed_ms(t0);

    let extra = serde_json::json!({ "split": split, "train": tcfg });
    let ck_path = out.join("model.ckpt");
    write_checkpoint(&outcome.model.to_checkpoint(extra)?, &ck_path)?;
    let trace_path = out.join("trace.csv");
    write_text(&trace_path, &outcome.trace.to_csv())?;
    let split_path = out.join("split.json");
    write_text(&split_path, &(serde_json::to_string_pretty(&split).expect("split serializes") + "\n"))?;
    let mut outputs = vec![ck_path, split_path, trace_path];
    if let Some(g) = &grid {
        let p = out.join("leaderboard.csv");
        write_text(&p, &leaderboard_csv(g))?;
        outputs.push(p);
    }
    outputs.sort();

    let mut m = RunManifest::new("train", cfg);
    m.inputs = hash_files(data, &graph_and_label_files(data)?)?;
    m.outputs = hash_files(out, &outputs)?;
    m.checkpoint = Some("model.ckpt".into());
    m.timings_ms.insert("train".into(), t_train);
    m.timings_ms.insert("total".into(), elapsed_ms(t0));
    m.write(out)?;
    Ok(TrainRun {
        outcome,
        split,
        leaderboard: grid,
        manifest: m,
    })
}

/// Loads a checkpoint together with the split it was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(Model, DatasetSplit)> {
    let ck = read_checkpoint(path)?;
    let (model, extra) = Model::from_checkpoint(&ck)?;
    let split = extra
        .get("split")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{}: checkpoint carries no split", path.display())))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::Validation(format!("{}: split: {e}", path.display())))
        })?;
    Ok((model, split))
}

fn check_dims(model: &Model, s: &PairedSample) -> Result<()> {
    let (da, db) = (s.graph_a.feature_dim(), s.graph_b.feature_dim());
    if da != model.d_a || db != model.d_b {
        return Err(Error::Config(format!(
            "node feature widths differ: checkpoint expects a={} b={}, data {} has a={} b={}",
            model.d_a,
            model.d_b,
            s.id(),
            da,
            db
        )));
    }
    Ok(())
}

/// Test-split predictions against the rater consensus, with bootstrap CI,
/// plus a pathologist-vs-consensus baseline row when at least two raters
/// scored the test samples. Rater biases are not used.
pub fn evaluate_model(
    model: &Model,
    split: &DatasetSplit,
    samples: &[PairedSample],
    n_resamples: usize,
    leave_one_out: bool,
    seed: u64,
) -> Result<EvalReport> {
    let endpoint = model.endpoint;
    let k = endpoint.num_classes();
    let by_id: BTreeMap<String, &PairedSample> = samples.iter().map(|s| (s.id(), s)).collect();
    let mut test: Vec<&PairedSample> = Vec::new();
    for id in &split.test {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("test sample {id} missing from data")))?;
        if s.labels_for(endpoint).next().is_some() {
            check_dims(model, s)?;
            test.push(s);
        }
    }
    if test.len() < 2 {
        return Err(Error::Validation(format!("need at least two labelled test samples, have {}", test.len())));
    }
    let prepared: Vec<PreparedPair> = test.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let refs: Vec<&PreparedPair> = prepared.iter().collect();
    let pred = model.predict(&refs)?;
    let truth: Vec<usize> = test
        .iter()
        .map(|s| usize::from(consensus(&s.labels_for(endpoint).map(|l| l.score).collect::<Vec<_>>())))
        .collect();
    let b = bootstrap_kappa(&pred, &truth, k, n_resamples, seed)?;
    let mut rows = vec![ReportRow::from_bootstrap(&model.config.label(), endpoint.name(), &b, test.len())];

    let mut rater_ids: Vec<&str> = test
        .iter()
        .flat_map(|s| s.labels_for(endpoint).map(|l| l.rater_id.as_str()))
        .collect();
    rater_ids.sort_unstable();
    rater_ids.dedup();
    if rater_ids.len() >= 2 {
        let ratings: Vec<Vec<(usize, usize)>> = test
            .iter()
            .map(|s| {
                s.labels_for(endpoint)
                    .map(|l| (rater_ids.binary_search(&l.rater_id.as_str()).expect("collected"), usize::from(l.score)))
                    .collect()
            })
            .collect();
        let n_raters = rater_ids.len();
        let pb = bootstrap(test.len(), n_resamples, seed, |idx| {
            pathologist_kappa(&ratings, idx, n_raters, k, leave_one_out)
        })?;
        rows.push(ReportRow::from_bootstrap(BASELINE_MODEL, endpoint.name(), &pb, test.len()));
    }
    Ok(EvalReport { rows })
}

/// Writes `report.csv` and `report.txt` for one checkpoint.
pub fn cmd_evaluate(cfg: &AppConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(EvalReport, RunManifest)> {
    let t0 = Instant::now();
    create_dir(out)?;
    let (model, split) = load_checkpoint(checkpoint)?;
    let samples = load_samples(data, Some(model.endpoint))?;
    let report = evaluate_model(&model, &split, &samples, cfg.eval.n_resamples, cfg.eval.leave_one_out, cfg.seed)?;
    let csv_path = out.join("report.csv");
    let txt_path = out.join("report.txt");
    write_text(&csv_path, &report.to_csv())?;
    write_text(&txt_path, &report.table())?;

    let mut m = RunManifest::new("evaluate", cfg);
    let mut inputs = hash_files(data, &graph_and_label_files(data)?)?;
    inputs.push(FileHash {
        path: checkpoint.to_string_lossy().into_owned(),
        sha256: sha256_file(checkpoint)?,
    });
    m.inputs = inputs;
    m.outputs = hash_files(out, &[csv_path, txt_path])?;
    m.checkpoint = Some(checkpoint.to_string_lossy().into_owned());
    m.reports = vec!["report.csv".into(), "report.txt".into()];
    m.timings_ms.insert("total".into(), elapsed_ms(t0));
    m.write(out)?;
    Ok((report, m))
}

/// Concatenates model rows in input order and appends one baseline row per
/// endpoint (the first one seen).
pub fn combine_reports(reports: &[EvalReport]) -> EvalReport {
    let mut rows = Vec::new();
    let mut baselines: Vec<ReportRow> = Vec::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        if r.model == BASELINE_MODEL {
            if !baselines.iter().any(|b| b.endpoint == r.endpoint) {
                baselines.push(r.clone());
            }
        } else {
            rows.push(r.clone());
        }
    }
    rows.extend(baselines);
    EvalReport { rows }
}

/// Combined `report.csv`, `report.txt` and `report.svg`.
pub fn cmd_report(cfg: &AppConfig, inputs: &[PathBuf], out: &Path) -> Result<(EvalReport, RunManifest)> {
    let t0 = Instant::now();
    create_dir(out)?;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for p in inputs {
        // A run directory stands for the report inside it.
        let file = if p.is_dir() { p.join("report.csv") } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        reports.push(EvalReport::from_csv(&text)?);
        files.push(file);
    }
    let combined = combine_reports(&reports);
    let outputs = [out.join("report.csv"), out.join("report.txt"), out.join("report.svg")];
    write_text(&outputs[0], &combined.to_csv())?;
    write_text(&outputs[1], &combined.table())?;
    write_text(&outputs[2], &combined.svg())?;

    let mut m = RunManifest::new("report", cfg);
    m.inputs = files
        .iter()
        .map(|f| {
            Ok(FileHash {
                path: f.to_string_lossy().into_owned(),
                sha256: sha256_file(f)?,
            })
        })
        .collect::<Result<_>>()?;
    m.outputs = hash_files(out, &outputs)?;
    m.reports = vec!["report.csv".into(), "report.txt".into(), "report.svg".into()];
    m.timings_ms.insert("total".into(), elapsed_ms(t0));
    m.write(out)?;
    Ok((combined, m))
}
