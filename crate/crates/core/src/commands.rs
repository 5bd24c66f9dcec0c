//! Filesystem side of the workflow. Every command reads a JSON config,
//! writes containers atomically under an output directory and records a
//! manifest with the digest of each file it read or wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{resolve_value, RunConfig};
use crate::container::{
    file_digest, read_checkpoint, read_chip, read_mask, sha256_hex, write_atomic, write_checkpoint, write_chip, write_layer,
    write_mask, write_png_gray, write_png_rgb,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_rgb, metrics_csv, report, spatial_confusion, GroupBy, MetricsRow};
use crate::labeling::{mask_to_rgb, Polygon};
use crate::normalize::NormStats;
use crate::pipeline::{self, AblationConfig, Scenes};
use crate::raster::{LabelMask, INTERIOR};
use crate::scene_sim::{Scene, SceneConfig};

pub const TOOL: &str = "fieldshift";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Train,
    Predict,
    Ablate,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Ablate => "ablate",
            Command::Evaluate => "evaluate",
        }
    }

    /// Subdirectory of the output root owned by the command.
    pub fn dir(self) -> &'static str {
        match self {
            Command::Simulate => "scene",
            c => c.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: PathBuf,
    /// Turns photometric augmentation off on top of the config.
    pub no_photometric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Configuration with every default materialized; feeding the manifest
    /// back as `--config` reproduces the run.
    pub resolved_config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
    /// Relative path (or the config path as given) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
    #[serde(default)]
    pub summary: Value,
}

/// What a finished command reports back.
#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub lines: Vec<String>,
}

/// Output files of one command, relative to its directory.
struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root)?;
        Ok(Outputs {
            root,
            files: BTreeMap::new(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let d = file_digest(&self.root.join(rel))?;
        self.files.insert(rel.to_string(), d);
        Ok(())
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel)?, bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn with(&mut self, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let p = self.path(rel)?;
        f(&p)?;
        self.record(rel)
    }
}

struct Inputs {
    base: PathBuf,
    files: BTreeMap<String, String>,
}

impl Inputs {
    fn note(&mut self, p: &Path) -> Result<()> {
        let key = p.strip_prefix(&self.base).unwrap_or(p).to_string_lossy().into_owned();
        self.files.insert(key, file_digest(p)?);
        Ok(())
    }
}

fn read_config_doc(opts: &Options) -> Result<Value> {
    let text = fs::read_to_string(&opts.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", opts.config.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid JSON in {}: {}", opts.config.display(), e)))
}

fn apply_switches(doc: &mut Value, opts: &Options) {
    if let Some(s) = opts.seed {
        doc["seed"] = json!(s);
    }
    if opts.no_photometric {
        crate::config::merge(doc, &json!({"augment": {"photometric": false}}));
    }
}

fn run_config(opts: &Options) -> Result<RunConfig> {
    let mut doc = resolve_value(&read_config_doc(opts)?)?;
    apply_switches(&mut doc, opts);
    RunConfig::from_value(&doc)
}

fn ablation_config(opts: &Options) -> Result<AblationConfig> {
    let doc = read_config_doc(opts)?;
    let doc = doc.get("resolved_config").cloned().unwrap_or(doc);
    let mut m: AblationConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid ablation matrix: {}", e)))?;
    m.base = resolve_value(&m.base)?;
    apply_switches(&mut m.base, opts);
    Ok(m)
}

fn ms(t: Instant) -> f64 {
    (t.elapsed().as_secs_f64() * 1e6).round() / 1e3
}

/// Runs one command under the requested thread cap.
pub fn execute(cmd: Command, opts: &Options) -> Result<Report> {
    pipeline::with_threads(opts.threads, || match cmd {
        Command::Simulate => simulate(opts),
        Command::Train => train(opts),
        Command::Predict => predict(opts),
        Command::Evaluate => evaluate(opts),
        Command::Ablate => ablate(opts),
    })?
}

fn finish(dir: PathBuf, manifest: Manifest, lines: Vec<String>) -> Result<Report> {
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Report { dir, manifest, lines })
}

fn manifest(cmd: Command, opts: &Options, resolved: Value, seed: u64, inputs: Inputs, outputs: Outputs) -> Manifest {
    Manifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: cmd.name().into(),
        seed,
        threads: opts.threads,
        resolved_config: resolved,
        norm_stats: None,
        inputs: inputs.files,
        outputs: outputs.files,
        timings_ms: BTreeMap::new(),
        summary: Value::Null,
    }
}

fn inputs_for(opts: &Options) -> Result<Inputs> {
    let mut i = Inputs {
        base: opts.out.clone(),
        files: BTreeMap::new(),
    };
    i.files.insert(opts.config.to_string_lossy().into_owned(), file_digest(&opts.config)?);
    Ok(i)
}

// ---------------------------------------------------------------- scenes

fn write_scene(out: &mut Outputs, name: &str, scene: &Scene, boundary_px: i64) -> Result<()> {
    out.bytes(&format!("{}/scene.json", name), serde_json::to_string_pretty(&scene.config)?.as_bytes())?;
    out.bytes(&format!("{}/fields.json", name), serde_json::to_string(&scene.field_polygons)?.as_bytes())?;
    for (k, img) in scene.imagery.iter().enumerate() {
        let tag = &scene.config.years[k].year_tag;
        out.with(&format!("{}/{}.fsch", name, tag), |p| write_chip(p, img))?;
        let labels = scene.label_mask(k, boundary_px)?;
        out.with(&format!("{}/{}_labels.fsmk", name, tag), |p| write_mask(p, &labels, "", tag))?;
        out.with(&format!("{}/{}_labels.png", name, tag), |p| {
            write_png_rgb(p, labels.width, labels.height, &mask_to_rgb(&labels))
        })?;
    }
    Ok(())
}

/// Rebuilds a scene written by `simulate`.
fn load_scene(dir: &Path, inputs: &mut Inputs) -> Result<Scene> {
    let read = |p: PathBuf, inputs: &mut Inputs| -> Result<Vec<u8>> {
        let b = fs::read(&p).map_err(|e| Error::Input(format!("cannot read {}: {}", p.display(), e)))?;
        inputs.note(&p)?;
        Ok(b)
    };
    let config: SceneConfig = serde_json::from_slice(&read(dir.join("scene.json"), inputs)?)?;
    let field_polygons: Vec<Vec<Polygon>> = serde_json::from_slice(&read(dir.join("fields.json"), inputs)?)?;
    let mut imagery = Vec::with_capacity(config.years.len());
    for y in &config.years {
        let p = dir.join(format!("{}.fsch", y.year_tag));
        let chip = read_chip(&p).map_err(|e| Error::Input(format!("{}: {}", p.display(), e)))?;
        inputs.note(&p)?;
        imagery.push(chip);
    }
    if field_polygons.len() != imagery.len() {
        return Err(Error::Input(format!("{}: field layers do not match the years", dir.display())));
    }
    Ok(Scene {
        imagery,
        field_polygons,
        config,
    })
}

fn scene_dir(opts: &Options, which: &str, expected: &SceneConfig) -> Result<PathBuf> {
    let dir = opts.out.join(Command::Simulate.dir()).join(which);
    if !dir.is_dir() {
        return Err(Error::Input(format!("scene directory {} does not exist; run simulate first", dir.display())));
    }
    let found: SceneConfig = serde_json::from_slice(&fs::read(dir.join("scene.json"))?)?;
    if &found != expected {
        return Err(Error::Config(format!("{} was simulated from a different scene config", dir.display())));
    }
    Ok(dir)
}

fn simulate(opts: &Options) -> Result<Report> {
    let cfg = run_config(opts)?;
    let t0 = Instant::now();
    let scenes = pipeline::simulate(&cfg)?;
    let t_sim = ms(t0);
    let final_dir = opts.out.join(Command::Simulate.dir());
    let staging = opts.out.join(format!(".{}.partial", Command::Simulate.dir()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let written = (|| -> Result<Manifest> {
        let mut out = Outputs::new(staging.clone())?;
        write_scene(&mut out, "train", &scenes.train, cfg.train.boundary_px)?;
        write_scene(&mut out, "test", &scenes.test, cfg.train.boundary_px)?;
        let mut m = manifest(Command::Simulate, opts, cfg.to_value(), cfg.seed, inputs_for(opts)?, out);
        m.timings_ms.insert("simulate".into(), t_sim);
        m.timings_ms.insert("total".into(), ms(t0));
        m.summary = json!({"years": scenes.train.year_tags(), "train_size_px": cfg.scene.scene_size_px, "test_size_px": cfg.test_scene_size_px});
        write_atomic(&staging.join(MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    })();
    let m = match written {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&staging, &final_dir)?;
    let lines = vec![format!(
        "simulated {} years into {} ({} files)",
        cfg.scene.years.len(),
        final_dir.display(),
        m.outputs.len()
    )];
    Ok(Report {
        dir: final_dir,
        manifest: m,
        lines,
    })
}

// ---------------------------------------------------------------- training

pub const CHECKPOINT: &str = "checkpoint.fsnw";
pub const TRAIN_LOG: &str = "train_log.csv";

fn train(opts: &Options) -> Result<Report> {
    let cfg = run_config(opts)?;
    let t0 = Instant::now();
    let mut inputs = inputs_for(opts)?;
    let (train_cfg, _) = pipeline::scene_configs(&cfg);
    let scene = load_scene(&scene_dir(opts, "train", &train_cfg)?, &mut inputs)?;
    let t_train = Instant::now();
    let outcome = pipeline::train(&cfg, &scene)?;
    let train_ms = ms(t_train);
    let dir = opts.out.join(Command::Train.dir());
    let mut out = Outputs::new(dir.clone())?;
    let extra = json!({"run_id": cfg.run_id, "norm_scheme": cfg.norm_scheme, "norm_stats": outcome.norm_stats, "best_epoch": outcome.best_epoch});
    out.with(CHECKPOINT, |p| write_checkpoint(p, &outcome.params, extra))?;
    out.bytes(TRAIN_LOG, pipeline::train_log_csv(&outcome.log).as_bytes())?;
    let mut m = manifest(Command::Train, opts, cfg.to_value(), cfg.seed, inputs, out);
    m.norm_stats = outcome.norm_stats.clone();
    m.timings_ms.insert("train".into(), train_ms);
    m.timings_ms.insert("total".into(), ms(t0));
    let last = outcome.log.last();
    m.summary = json!({
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "final_train_loss": last.map(|e| e.train_loss),
        "best_val_iou": outcome.best_epoch.map(|b| outcome.log[b].val_iou),
    });
    let lines = match (outcome.best_epoch, last) {
        (Some(b), Some(l)) => vec![format!(
            "trained {} epochs; final loss {:.4}; kept epoch {} (validation IoU {:.3})",
            outcome.log.len(),
            l.train_loss,
            b,
            outcome.log[b].val_iou
        )],
        _ => vec!["zero epochs: checkpoint holds the initialization".to_string()],
    };
    finish(dir, m, lines)
}

// ---------------------------------------------------------------- prediction

pub const HARDENED: &str = "hardened.fsmk";
pub const HARDENED_FIXED: &str = "hardened_fixed.fsmk";

fn load_checkpoint(opts: &Options, cfg: &RunConfig, inputs: &mut Inputs) -> Result<(crate::network::NetworkParams<f32>, Option<NormStats>)> {
    let p = opts.out.join(Command::Train.dir()).join(CHECKPOINT);
    if !p.is_file() {
        return Err(Error::Input(format!("checkpoint {} does not exist; run train first", p.display())));
    }
    let (params, header) = read_checkpoint(&p)?;
    inputs.note(&p)?;
    if params.arch != cfg.arch {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture (depth {}, width {}) does not match the config (depth {}, width {})",
            params.arch.depth, params.arch.base_width, cfg.arch.depth, cfg.arch.base_width
        )));
    }
    let stats: Option<NormStats> = serde_json::from_value(header.extra.get("norm_stats").cloned().unwrap_or(Value::Null))?;
    if header.extra.get("norm_scheme") != Some(&json!(cfg.norm_scheme)) {
        return Err(Error::Checkpoint("checkpoint was trained with a different normalization scheme".into()));
    }
    Ok((params, stats))
}

fn quicklook_gray(values: &[f64], max: f64) -> Vec<u8> {
    values.iter().map(|&v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn predict(opts: &Options) -> Result<Report> {
    let cfg = run_config(opts)?;
    let t0 = Instant::now();
    let mut inputs = inputs_for(opts)?;
    let (params, stats) = load_checkpoint(opts, &cfg, &mut inputs)?;
    let (_, test_cfg) = pipeline::scene_configs(&cfg);
    let scene = load_scene(&scene_dir(opts, "test", &test_cfg)?, &mut inputs)?;
    let t_pred = Instant::now();
    let preds = pipeline::predict(&cfg, &params, stats.as_ref(), &scene)?;
    let pred_ms = ms(t_pred);
    let dir = opts.out.join(Command::Predict.dir());
    let mut out = Outputs::new(dir.clone())?;
    let mut summary = serde_json::Map::new();
    let mut lines = Vec::new();
    for p in &preds {
        let y = &p.year;
        let o = &p.output;
        for (name, t) in [("mean_probs", &o.mean_probs), ("std_probs", &o.std_probs), ("entropy", &o.entropy), ("mutual_info", &o.mutual_info)] {
            out.with(&format!("{}/{}.fsch", y, name), |path| write_layer(path, t, name, "", y))?;
        }
        out.with(&format!("{}/{}", y, HARDENED), |path| write_mask(path, &o.hardened, "", y))?;
        out.with(&format!("{}/hardened.png", y), |path| {
            write_png_rgb(path, o.hardened.width, o.hardened.height, &mask_to_rgb(&o.hardened))
        })?;
        out.with(&format!("{}/interior_prob.png", y), |path| {
            write_png_gray(path, o.mean_probs.w, o.mean_probs.h, &quicklook_gray(o.mean_probs.channel(INTERIOR as usize), 1.0))
        })?;
        if let Some(h) = &p.compare_hardened {
            out.with(&format!("{}/{}", y, HARDENED_FIXED), |path| write_mask(path, h, "", y))?;
        }
        summary.insert(
            y.clone(),
            json!({"threshold_used": o.threshold_used, "threshold_fallback": o.threshold_fallback, "probability_range": o.probability_range()}),
        );
        lines.push(format!(
            "{}: threshold {:.3}{}",
            y,
            o.threshold_used,
            if o.threshold_fallback { " (fallback)" } else { "" }
        ));
    }
    let mut m = manifest(Command::Predict, opts, cfg.to_value(), cfg.seed, inputs, out);
    m.norm_stats = stats;
    m.summary = Value::Object(summary);
    m.timings_ms.insert("predict".into(), pred_ms);
    m.timings_ms.insert("total".into(), ms(t0));
    finish(dir, m, lines)
}

// ---------------------------------------------------------------- evaluation

fn write_tables(out: &mut Outputs, prefix: &str, rows: &[MetricsRow]) -> Result<()> {
    out.bytes(&format!("{}metrics.csv", prefix), metrics_csv(rows)?.as_bytes())?;
    for (g, name) in [(GroupBy::Year, "by_year"), (GroupBy::Tile, "by_tile"), (GroupBy::Run, "by_run")] {
        out.bytes(&format!("{}{}.csv", prefix, name), report(rows, g)?.to_csv()?.as_bytes())?;
    }
    Ok(())
}

fn confusion_png(out: &mut Outputs, rel: &str, pred: &LabelMask, reference: &LabelMask, cfg: &RunConfig) -> Result<()> {
    let cats = spatial_confusion(pred, reference, cfg.evaluation.boundary_mode)?;
    out.with(rel, |p| write_png_rgb(p, pred.width, pred.height, &confusion_rgb(&cats)))
}

fn pooled_line(rows: &[MetricsRow], year: &str) -> String {
    let m = crate::evaluation::metrics(&pipeline::pooled_counts(rows, |y| y == year));
    format!("{}: precision {:.3} recall {:.3} F1 {:.3} IoU {:.3}", year, m.precision, m.recall, m.f1, m.iou)
}

fn evaluate(opts: &Options) -> Result<Report> {
    let cfg = run_config(opts)?;
    let t0 = Instant::now();
    let mut inputs = inputs_for(opts)?;
    let (_, test_cfg) = pipeline::scene_configs(&cfg);
    let sdir = scene_dir(opts, "test", &test_cfg)?;
    let pdir = opts.out.join(Command::Predict.dir());
    let dir = opts.out.join(Command::Evaluate.dir());
    let mut out = Outputs::new(dir.clone())?;
    let (mut rows, mut fixed_rows, mut lines) = (Vec::new(), Vec::new(), Vec::new());
    for y in &cfg.scene.years {
        let tag = &y.year_tag;
        let lp = sdir.join(format!("{}_labels.fsmk", tag));
        let reference = read_mask(&lp)?;
        inputs.note(&lp)?;
        let hp = pdir.join(tag).join(HARDENED);
        if !hp.is_file() {
            return Err(Error::Input(format!("prediction {} does not exist; run predict first", hp.display())));
        }
        let pred = read_mask(&hp)?;
        inputs.note(&hp)?;
        rows.extend(pipeline::tile_rows(&cfg, &cfg.run_id, tag, &pred, &reference)?);
        confusion_png(&mut out, &format!("confusion_{}.png", tag), &pred, &reference, &cfg)?;
        let fp = pdir.join(tag).join(HARDENED_FIXED);
        if fp.is_file() {
            let fixed = read_mask(&fp)?;
            inputs.note(&fp)?;
            fixed_rows.extend(pipeline::tile_rows(&cfg, &cfg.run_id, tag, &fixed, &reference)?);
        }
        lines.push(pooled_line(&rows, tag));
    }
    write_tables(&mut out, "", &rows)?;
    if !fixed_rows.is_empty() {
        write_tables(&mut out, "fixed_threshold/", &fixed_rows)?;
    }
    let mut m = manifest(Command::Evaluate, opts, cfg.to_value(), cfg.seed, inputs, out);
    m.timings_ms.insert("total".into(), ms(t0));
    finish(dir, m, lines)
}

// ---------------------------------------------------------------- ablation

fn ablate(opts: &Options) -> Result<Report> {
    let matrix = ablation_config(opts)?;
    let (base, cells) = matrix.resolve(None)?;
    let t0 = Instant::now();
    let (scenes, outcomes): (Scenes, _) = pipeline::ablate(&base, &cells)?;
    let run_ms = ms(t0);
    let dir = opts.out.join(Command::Ablate.dir());
    let mut out = Outputs::new(dir.clone())?;
    let (mut rows, mut fixed_rows, mut failed, mut lines) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (cell, outcome) in cells.iter().zip(&outcomes) {
        match &outcome.result {
            Ok(r) => {
                out.bytes(&format!("cells/{}/train_log.csv", outcome.name), pipeline::train_log_csv(&r.training.log).as_bytes())?;
                for (k, p) in r.predictions.iter().enumerate() {
                    let reference = scenes.test.label_mask(k, cell.train.boundary_px)?;
                    confusion_png(
                        &mut out,
                        &format!("cells/{}/confusion_{}.png", outcome.name, p.year),
                        &p.output.hardened,
                        &reference,
                        cell,
                    )?;
                }
                rows.extend(r.evaluation.rows.iter().cloned());
                fixed_rows.extend(r.evaluation.compare_rows.iter().cloned());
                lines.push(format!("{}: ok", outcome.name));
            }
            Err(e) => {
                failed.push(json!({"cell": outcome.name, "error": e.kind(), "message": e.to_string()}));
                lines.push(format!("{}: failed ({})", outcome.name, e));
            }
        }
    }
    if !rows.is_empty() {
        write_tables(&mut out, "", &rows)?;
    }
    if !fixed_rows.is_empty() {
        write_tables(&mut out, "fixed_threshold/", &fixed_rows)?;
    }
    let status = json!({"partial": !failed.is_empty(), "cells": cells.len(), "failed": failed});
    out.bytes("status.json", serde_json::to_string_pretty(&status)?.as_bytes())?;
    let resolved = serde_json::to_value(AblationConfig {
        base: base.to_value(),
        cells: matrix.cells.clone(),
    })?;
    let mut m = manifest(Command::Ablate, opts, resolved, base.seed, inputs_for(opts)?, out);
    m.summary = status;
    m.timings_ms.insert("cells".into(), run_ms);
    m.timings_ms.insert("total".into(), ms(t0));
    finish(dir, m, lines)
}
