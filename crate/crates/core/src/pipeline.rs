//! In-memory workflow: simulate scenes, train, predict every year, evaluate,
//! and run ablation matrices. The command layer persists what these return.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::augment_pair;
use crate::config::{LossKind, RunConfig, WeightMode};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_counts, metrics, spatial_confusion, Category, ConfusionCounts, MetricsRow};
use crate::losses_opt::{
    class_pixel_counts, dynamic_class_weights, lr_at, optimizer_step, sam_step, tversky_focal_loss, weighted_ce_loss,
    ClassWeights, LossOutput, OptKind, OptState,
};
use crate::mc_inference::{harden, predict_scene_with, McEnsembleOutput, ThresholdPolicy};
use crate::network::{backward, forward, init_params, Mode, NetworkParams};
use crate::normalize::{compute_stats, histogram_match, normalize_chip, HistogramReference, Locality, NormStats};
use crate::raster::{Chip, LabelMask, NUM_CLASSES};
use crate::rng;
use crate::scene_sim::{export_year_chips, generate_scene, tile_id, Scene, SceneConfig};
use crate::tensor::{softmax, softmax_backward, Tensor};

pub const STREAM_SCENE_TRAIN: u64 = 100;
pub const STREAM_SCENE_TEST: u64 = 101;
pub const STREAM_INIT: u64 = 200;
pub const STREAM_SHUFFLE: u64 = 201;
pub const STREAM_AUGMENT: u64 = 202;
pub const STREAM_DROPOUT: u64 = 203;
pub const STREAM_MC: u64 = 300;

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    let pool = b.build().map_err(|e| Error::Config(format!("cannot build thread pool: {}", e)))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct Scenes {
    /// Source of training chips.
    pub train: Scene,
    /// Held-out geography used for prediction and evaluation.
    pub test: Scene,
}

pub fn scene_configs(cfg: &RunConfig) -> (SceneConfig, SceneConfig) {
    let mut train = cfg.scene.clone();
    train.seed = rng::derive_seed(cfg.seed, &[STREAM_SCENE_TRAIN]);
    let mut test = cfg.scene.clone();
    test.seed = rng::derive_seed(cfg.seed, &[STREAM_SCENE_TEST]);
    test.scene_size_px = cfg.test_scene_size_px;
    (train, test)
}

pub fn simulate(cfg: &RunConfig) -> Result<Scenes> {
    let (a, b) = scene_configs(cfg);
    Ok(Scenes {
        train: generate_scene(&a)?,
        test: generate_scene(&b)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,train_loss,val_iou,val_f1";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&format!("{},{:.8},{:.8},{:.6},{:.6}\n", e.epoch, e.lr, e.train_loss, e.val_iou, e.val_f1));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub norm_stats: Option<NormStats>,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept (`None` when no epoch ran).
    pub best_epoch: Option<usize>,
}

/// Training and validation windows of the training year.
pub fn training_windows(cfg: &RunConfig, scene: &Scene) -> Result<(Vec<(Chip, LabelMask)>, Vec<(Chip, LabelMask)>)> {
    let t = &cfg.train;
    let all = export_year_chips(scene, t.train_year, t.chip_size, t.chip_overlap, t.boundary_px)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, w) in all.into_iter().enumerate() {
        if t.validation_every > 0 && i % t.validation_every == t.validation_every - 1 {
            val.push(w);
        } else {
            train.push(w);
        }
    }
    if train.is_empty() {
        return Err(Error::Config("no training windows fit the scene".into()));
    }
    Ok((train, val))
}

fn prepare(cfg: &RunConfig, chip: &Chip, stats: Option<&NormStats>) -> Result<Tensor<f32>> {
    Ok(Tensor::from_chip(&normalize_chip(chip, cfg.norm_scheme, stats)?))
}

fn loss_for(cfg: &RunConfig, probs: &[Tensor<f32>], targets: &[LabelMask], weights: &ClassWeights) -> Result<LossOutput<f32>> {
    match cfg.train.loss {
        LossKind::Tfl => tversky_focal_loss(probs, targets, &cfg.train.tfl, weights),
        LossKind::Ce => weighted_ce_loss(probs, targets, weights),
    }
}

/// Locates an error at a training step, keeping any inner training message bare.
fn training_error(at: &str, e: Error) -> Error {
    match e {
        Error::Training(m) => Error::Training(format!("{}: {}", at, m)),
        e => Error::Training(format!("{}: {}", at, e)),
    }
}

/// Loss and parameter gradient of one batch at `data`.
fn batch_gradient(
    cfg: &RunConfig,
    params: &NetworkParams<f32>,
    xs: &[Tensor<f32>],
    targets: &[LabelMask],
    weights: &ClassWeights,
    rate: f64,
    seed: u64,
) -> Result<(f64, Vec<f32>)> {
    let (logits, caches) = forward(params, xs, Mode::Train, rate, seed)?;
    if logits.iter().any(|l| l.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training("non-finite network output".into()));
    }
    let probs: Vec<Tensor<f32>> = logits.iter().map(softmax).collect();
    let out = loss_for(cfg, &probs, targets, weights)?;
    let glog: Vec<Tensor<f32>> = probs.iter().zip(&out.grad).map(|(p, g)| softmax_backward(p, g)).collect();
    let (grads, _) = backward(params, caches.as_deref(), &glog)?;
    Ok((out.loss, grads))
}

/// Field IoU and F1 of argmax predictions on labelled windows.
pub fn validate(cfg: &RunConfig, params: &NetworkParams<f32>, stats: Option<&NormStats>, windows: &[(Chip, LabelMask)]) -> Result<(f64, f64)> {
    let counts = windows
        .par_iter()
        .map(|(c, m)| {
            let x = prepare(cfg, c, stats)?;
            let (logits, _) = forward(params, std::slice::from_ref(&x), Mode::Eval, 0.0, 0)?;
            let p = softmax(&logits[0]);
            let p64 = Tensor::from_vec(p.c, p.h, p.w, p.data.iter().map(|&v| v as f64).collect());
            let (pred, _, _) = harden(&p64, ThresholdPolicy::Argmax);
            confusion_counts(&pred, m, cfg.evaluation.boundary_mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = counts.iter().fold(ConfusionCounts::default(), |a, b| a.merge(b));
    let m = metrics(&total);
    Ok((m.iou, m.f1))
}

pub fn train(cfg: &RunConfig, scene: &Scene) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let (windows, val) = training_windows(cfg, scene)?;
    let norm_stats = match cfg.norm_scheme.locality {
        Locality::Global => Some(compute_stats(windows.iter().map(|w| &w.0), cfg.norm_scheme)?),
        Locality::Local => None,
    };
    let stats = norm_stats.as_ref();
    let global_weights = match t.weights {
        WeightMode::Global => Some(ClassWeights::from_counts(
            &class_pixel_counts(windows.iter().map(|w| &w.1), NUM_CLASSES)?,
            t.weight_cap,
        )?),
        WeightMode::Uniform => Some(ClassWeights::uniform(NUM_CLASSES)),
        WeightMode::Local => None,
    };
    let mut params = init_params::<f32>(&cfg.arch, rng::derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let segments = params.layers.iter().map(|l| (l.weight_offset, l.name.clone())).collect();
    let mut opt = OptState::<f32>::new(t.optimizer.clone(), params.data.len())?.with_segments(segments);
    let rate = cfg.train_dropout_rate();
    let mut log = Vec::with_capacity(t.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for epoch in 0..t.epochs {
        let lr = lr_at(&t.schedule, epoch)?;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(t.batch_size).enumerate() {
            let samples = idx
                .par_iter()
                .map(|&i| {
                    let mut r = rng::stream(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                    let (c, m) = augment_pair(&windows[i].0, &windows[i].1, &cfg.augment, &mut r)?;
                    Ok((prepare(cfg, &c, stats)?, m))
                })
                .collect::<Result<Vec<_>>>()?;
            let (xs, targets): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
            let weights = match &global_weights {
                Some(w) => w.clone(),
                None => dynamic_class_weights(&targets, NUM_CLASSES, t.weight_cap)?,
            };
            let seed = rng::derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]);
            let where_ = || format!("epoch {} batch {}", epoch, b);
            let loss = if t.optimizer.kind == OptKind::Sam {
                let mut first = None;
                let snapshot = params.clone();
                sam_step(
                    &mut params.data,
                    |w| {
                        let mut p = snapshot.clone();
                        p.data.copy_from_slice(w);
                        let (l, g) = batch_gradient(cfg, &p, &xs, &targets, &weights, rate, seed)?;
                        first.get_or_insert(l);
                        Ok(g)
                    },
                    &mut opt,
                    lr,
                )
                .map_err(|e| training_error(&where_(), e))?;
                first.unwrap_or(f64::NAN)
            } else {
                let (l, g) = batch_gradient(cfg, &params, &xs, &targets, &weights, rate, seed)
                    .map_err(|e| training_error(&where_(), e))?;
                if l.is_finite() {
                    optimizer_step(&mut params.data, &g, &mut opt, lr).map_err(|e| training_error(&where_(), e))?;
                }
                l
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at {}", where_())));
            }
            params.check_finite(&params.data, "parameter").map_err(|e| training_error(&where_(), e))?;
            loss_sum += loss;
            batches += 1;
        }
        let (val_iou, val_f1) = if val.is_empty() { (f64::NAN, f64::NAN) } else { validate(cfg, &params, stats, &val)? };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_iou,
            val_f1,
        });
        log::info!("epoch {} lr {:.5} loss {:.4} val IoU {:.3}", epoch, lr, loss_sum / batches as f64, val_iou);
        let score = if val_iou.is_nan() { f64::NEG_INFINITY } else { val_iou };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val.is_empty()) {
            best = Some((score, epoch, params.data.clone()));
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, data)) = best {
        params.data = data;
    }
    Ok(TrainOutcome {
        params,
        norm_stats,
        log,
        best_epoch,
    })
}

#[derive(Debug, Clone)]
pub struct YearPrediction {
    pub year: String,
    pub output: McEnsembleOutput,
    /// Hardening at the comparison threshold, when configured.
    pub compare_hardened: Option<LabelMask>,
}

/// Predicts every year of `scene` with the configured tiling and ensemble.
pub fn predict(cfg: &RunConfig, params: &NetworkParams<f32>, stats: Option<&NormStats>, scene: &Scene) -> Result<Vec<YearPrediction>> {
    let mc = cfg.effective_mc();
    let scheme = cfg.norm_scheme;
    let prep = move |w: &Chip| normalize_chip(w, scheme, stats);
    let reference = cfg
        .evaluation
        .hist_match
        .then(|| HistogramReference::from_chip(&scene.imagery[cfg.train.train_year]));
    scene
        .imagery
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let matched;
            let img = match &reference {
                Some(r) if k != cfg.train.train_year => {
                    matched = histogram_match(img, r)?;
                    &matched
                }
                _ => img,
            };
            let output = predict_scene_with(params, img, cfg.tiles, &mc, &prep)?;
            let compare_hardened = match (cfg.evaluation.compare_fixed_threshold, mc.threshold) {
                (Some(t), ThresholdPolicy::Fixed { t: u }) if t == u => None,
                (Some(t), _) => Some(harden(&output.mean_probs, ThresholdPolicy::Fixed { t }).0),
                (None, _) => None,
            };
            Ok(YearPrediction {
                year: scene.config.years[k].year_tag.clone(),
                output,
                compare_hardened,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    /// Rows for the comparison hardening (empty when not configured).
    pub compare_rows: Vec<MetricsRow>,
    /// Whole-scene confusion raster per year.
    pub confusion: Vec<(String, Vec<Category>)>,
}

pub fn tile_rows(cfg: &RunConfig, run_id: &str, year: &str, pred: &LabelMask, reference: &LabelMask) -> Result<Vec<MetricsRow>> {
    let cs = cfg.tiles.core_size;
    let (rows, cols) = (reference.height / cs, reference.width / cs);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let p = pred.crop(r * cs, c * cs, cs, cs)?;
            let g = reference.crop(r * cs, c * cs, cs, cs)?;
            out.push(MetricsRow {
                run_id: run_id.into(),
                norm_scheme: cfg.norm_scheme.code(),
                year: year.into(),
                tile_id: tile_id(r, c),
                counts: confusion_counts(&p, &g, cfg.evaluation.boundary_mode)?,
            });
        }
    }
    Ok(out)
}

/// Per-tile, per-year metrics against the scene's reference masks.
pub fn evaluate(cfg: &RunConfig, run_id: &str, preds: &[YearPrediction], scene: &Scene) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for p in preds {
        let k = scene
            .year_index(&p.year)
            .ok_or_else(|| Error::Input(format!("scene has no year {}", p.year)))?;
        let reference = scene.label_mask(k, cfg.train.boundary_px)?;
        ev.rows.extend(tile_rows(cfg, run_id, &p.year, &p.output.hardened, &reference)?);
        if let Some(h) = &p.compare_hardened {
            ev.compare_rows.extend(tile_rows(cfg, run_id, &p.year, h, &reference)?);
        }
        ev.confusion.push((p.year.clone(), spatial_confusion(&p.output.hardened, &reference, cfg.evaluation.boundary_mode)?));
    }
    Ok(ev)
}

/// Counts pooled over the rows whose year satisfies `keep`.
pub fn pooled_counts(rows: &[MetricsRow], keep: impl Fn(&str) -> bool) -> ConfusionCounts {
    rows.iter()
        .filter(|r| keep(&r.year))
        .fold(ConfusionCounts::default(), |a, r| a.merge(&r.counts))
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub training: TrainOutcome,
    pub predictions: Vec<YearPrediction>,
    pub evaluation: Evaluation,
}

/// Train, predict and evaluate one configuration on prepared scenes.
pub fn run(cfg: &RunConfig, scenes: &Scenes) -> Result<RunResult> {
    let training = train(cfg, &scenes.train)?;
    let predictions = predict(cfg, &training.params, training.norm_stats.as_ref(), &scenes.test)?;
    let evaluation = evaluate(cfg, &cfg.run_id, &predictions, &scenes.test)?;
    Ok(RunResult {
        config: cfg.clone(),
        training,
        predictions,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Base run configuration document (may name a preset).
    pub base: Value,
    pub cells: Vec<AblationCell>,
}

impl AblationConfig {
    /// Resolved configuration of every cell; scene and seed come from the base.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<(RunConfig, Vec<RunConfig>)> {
        let mut base_doc = self.base.clone();
        if let Some(s) = seed_override {
            base_doc["seed"] = Value::from(s);
        }
        let base = RunConfig::from_value(&base_doc)?;
        if self.cells.is_empty() {
            return Err(Error::Config("ablation matrix has no cells".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            if !names.insert(c.name.clone()) {
                return Err(Error::Config(format!("duplicate cell name '{}'", c.name)));
            }
            if c.overrides.get("scene").is_some() || c.overrides.get("seed").is_some() {
                return Err(Error::Config(format!("cell '{}' may not override the shared scene or seed", c.name)));
            }
            let mut cfg = base.with_overrides(&c.overrides)?;
            cfg.run_id = c.name.clone();
            cells.push(cfg);
        }
        Ok((base, cells))
    }
}

/// Result of one ablation cell; failures are kept rather than aborting.
#[derive(Debug)]
pub struct CellOutcome {
    pub name: String,
    pub result: std::result::Result<RunResult, Error>,
}

pub fn ablate(base: &RunConfig, cells: &[RunConfig]) -> Result<(Scenes, Vec<CellOutcome>)> {
    let scenes = simulate(base)?;
    let outcomes = cells
        .iter()
        .map(|c| {
            log::info!("ablation cell {}", c.run_id);
            let result = run(c, &scenes);
            if let Err(e) = &result {
                log::warn!("cell {} failed: {}", c.run_id, e);
            }
            CellOutcome {
                name: c.run_id.clone(),
                result,
            }
        })
        .collect();
    Ok((scenes, outcomes))
}

/// The five dropout/photometric regimes of the augmentation study.
pub fn regime_cells() -> Vec<AblationCell> {
    let cell = |name: &str, photometric: bool, regime: &str| AblationCell {
        name: name.into(),
        overrides: serde_json::json!({
            "augment": {"photometric": photometric},
            "dropout_regime": regime,
        }),
    };
    vec![
        cell("no-mc-no-photo", false, "none"),
        cell("mc-no-photo", false, "mc"),
        cell("no-mc-photo", true, "none"),
        cell("train-dropout-photo", true, "train-only"),
        cell("mc-photo", true, "mc"),
    ]
}
