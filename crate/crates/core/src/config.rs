//! Run configuration: JSON documents layered on a named preset.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::AugmentConfig;
use crate::error::{config_err, Error, Result};
use crate::evaluation::BoundaryMode;
use crate::losses_opt::{LrSchedule, OptConfig, OptKind, TflConfig, DEFAULT_WEIGHT_CAP};
use crate::mc_inference::{McConfig, ThresholdPolicy, TileScheme};
use crate::network::ArchSpec;
use crate::normalize::NormScheme;
use crate::scene_sim::{SceneConfig, YearShift};

pub const PRESETS: [&str; 2] = ["desk", "paper-xl"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutRegime {
    None,
    TrainOnly,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Tfl,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Recomputed from every batch.
    Local,
    /// Computed once from all training labels.
    Global,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Core size of a training chip; the network sees `chip_size + 2·chip_overlap`.
    pub chip_size: usize,
    pub chip_overlap: usize,
    pub boundary_px: i64,
    /// Every n-th training window is held out for checkpoint selection.
    pub validation_every: usize,
    /// Year index whose imagery is used for training.
    pub train_year: usize,
    pub loss: LossKind,
    pub tfl: TflConfig,
    pub weights: WeightMode,
    pub weight_cap: f64,
    pub optimizer: OptConfig,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub boundary_mode: BoundaryMode,
    /// Match each year's histogram to the training year before prediction.
    pub hist_match: bool,
    /// Extra hardening evaluated next to the configured policy.
    pub compare_fixed_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub run_id: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub test_scene_size_px: usize,
    pub norm_scheme: NormScheme,
    pub augment: AugmentConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub dropout_regime: DropoutRegime,
    pub mc: McConfig,
    pub tiles: TileScheme,
    pub evaluation: EvalConfig,
}

fn shift(tag: &str, offset: [f32; 4], scale: [f32; 4], noise: f32, smoothing: u32) -> YearShift {
    YearShift {
        year_tag: tag.into(),
        band_mean_offset: offset.to_vec(),
        band_std_scale: scale.to_vec(),
        noise_sigma: noise,
        smoothing_passes: smoothing,
    }
}

/// Three years: a smoothed composite base year and two years whose
/// brightness drifts mostly in the NIR band.
pub fn desk_years() -> Vec<YearShift> {
    vec![
        shift("y1", [0.0; 4], [1.0; 4], 0.004, 1),
        shift("y2", [0.005, 0.008, 0.01, 0.04], [1.05, 1.05, 1.08, 1.2], 0.008, 0),
        shift("y3", [-0.005, 0.0, 0.008, -0.035], [0.95, 0.97, 1.02, 0.85], 0.008, 0),
    ]
}

fn desk_preset() -> Value {
    let scene = SceneConfig {
        scene_size_px: 480,
        band_count: 4,
        field_density: 0.45,
        mean_field_diameter_px: 22,
        churn_fraction: 0.1,
        years: desk_years(),
        seed: 0,
        field_gap_px: 1.0,
        downsample_factor: 8,
        reflectance: None,
    };
    let train = TrainConfig {
        epochs: 30,
        batch_size: 8,
        chip_size: 56,
        chip_overlap: 4,
        boundary_px: 2,
        validation_every: 8,
        train_year: 0,
        loss: LossKind::Tfl,
        tfl: TflConfig::default(),
        weights: WeightMode::Local,
        weight_cap: DEFAULT_WEIGHT_CAP,
        optimizer: OptConfig::with_kind(OptKind::Adam),
        schedule: LrSchedule {
            initial_lr: 0.002,
            power: 0.8,
            total_epochs: 30,
        },
    };
    json!({
        "preset": "desk",
        "run_id": "run",
        "scene": scene,
        "test_scene_size_px": 240,
        "norm_scheme": "mm-lab",
        "augment": AugmentConfig::default(),
        "arch": ArchSpec::desk(),
        "train": train,
        "dropout_regime": DropoutRegime::Mc,
        "mc": McConfig { threshold: ThresholdPolicy::Adaptive, ..McConfig::default() },
        "tiles": TileScheme { core_size: 80, input_size: 96 },
        "evaluation": EvalConfig {
            boundary_mode: BoundaryMode::Negative,
            hist_match: false,
            compare_fixed_threshold: Some(0.75),
        },
    })
}

fn paper_xl_preset() -> Value {
    let mut v = desk_preset();
    let over = json!({
        "preset": "paper-xl",
        "scene": {"scene_size_px": 4000, "mean_field_diameter_px": 14},
        "test_scene_size_px": 4000,
        "arch": ArchSpec::paper_xl(),
        "train": {
            "epochs": 120,
            "batch_size": 32,
            "chip_size": 200,
            "chip_overlap": 12,
            "optimizer": OptConfig::default(),
            "schedule": LrSchedule::default(),
        },
        "mc": {"trials": 30},
        "tiles": {"core_size": 2000, "input_size": 2368},
    });
    merge(&mut v, &over);
    v
}

pub fn preset(name: &str) -> Result<Value> {
    match name {
        "desk" => Ok(desk_preset()),
        "paper-xl" => Ok(paper_xl_preset()),
        _ => config_err(format!("unknown preset '{}' (available: {})", name, PRESETS.join(", "))),
    }
}

/// Recursive object merge; non-object values in `over` replace `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Materializes a user document: manifests contribute their resolved
/// config, a `preset` key pulls in the named preset underneath.
pub fn resolve_value(doc: &Value) -> Result<Value> {
    if let Some(resolved) = doc.get("resolved_config") {
        return Ok(resolved.clone());
    }
    if !doc.is_object() {
        return config_err("configuration must be a JSON object");
    }
    let mut out = match doc.get("preset") {
        Some(Value::String(name)) => preset(name)?,
        Some(Value::Null) | None => json!({}),
        Some(_) => return config_err("preset must be a string"),
    };
    merge(&mut out, doc);
    Ok(out)
}

impl RunConfig {
    pub fn from_value(doc: &Value) -> Result<RunConfig> {
        let v = resolve_value(doc)?;
        if v.get("seed").is_none_or(Value::is_null) {
            return config_err("seed is mandatory");
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid JSON: {}", e)))?;
        Self::from_value(&v)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Same configuration with overrides merged on top.
    pub fn with_overrides(&self, over: &Value) -> Result<RunConfig> {
        let mut v = self.to_value();
        merge(&mut v, over);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.arch.validate()?;
        self.augment.validate()?;
        self.train.tfl.validate()?;
        self.train.optimizer.validate()?;
        self.mc.validate()?;
        if self.arch.in_bands != self.scene.band_count {
            return config_err(format!(
                "arch.in_bands {} differs from scene.band_count {}",
                self.arch.in_bands, self.scene.band_count
            ));
        }
        if self.arch.classes != crate::raster::NUM_CLASSES {
            return config_err("arch.classes must be 3 (background, interior, boundary)");
        }
        let f = self.arch.downsample_factor();
        let window = self.train.chip_size + 2 * self.train.chip_overlap;
        if !window.is_multiple_of(f) {
            return config_err(format!("training window {} is not a multiple of the downsampling factor {}", window, f));
        }
        self.tiles.validate(f)?;
        if !self.test_scene_size_px.is_multiple_of(self.tiles.core_size) {
            return config_err(format!(
                "test_scene_size_px {} is not a whole number of {} px cores",
                self.test_scene_size_px, self.tiles.core_size
            ));
        }
        if self.train.batch_size == 0 || self.train.validation_every == 1 {
            return config_err("batch_size must be positive and validation_every must not be 1");
        }
        if self.train.train_year >= self.scene.years.len() {
            return config_err("train_year is out of range");
        }
        if self.train.schedule.total_epochs == 0 && self.train.epochs > 0 {
            return config_err("schedule.total_epochs must be positive");
        }
        if self.train.epochs > self.train.schedule.total_epochs {
            return config_err("epochs exceed schedule.total_epochs");
        }
        Ok(())
    }

    /// Training-time dropout rate implied by the regime.
    pub fn train_dropout_rate(&self) -> f64 {
        match self.dropout_regime {
            DropoutRegime::None => 0.0,
            _ => self.arch.dropout_rate_train,
        }
    }

    /// Ensemble settings implied by the regime; non-MC regimes collapse to
    /// one deterministic pass.
    pub fn effective_mc(&self) -> McConfig {
        let mut m = self.mc.clone();
        m.seed = crate::rng::derive_seed(self.seed, &[crate::pipeline::STREAM_MC]);
        if self.dropout_regime != DropoutRegime::Mc {
            m.trials = 1;
            m.inference_dropout_rate = 0.0;
        }
        m
    }
}
