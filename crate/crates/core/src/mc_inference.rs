//! Monte Carlo dropout ensembles: per-pixel mean, spread, predictive entropy
//! and mutual information, threshold hardening, and overlap-tiled scene
//! inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::network::{forward, Mode, NetworkParams};
use crate::raster::{Chip, LabelMask, BACKGROUND, INTERIOR};
use crate::rng;
use crate::tensor::{softmax, Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const ADAPTIVE_BINS: usize = 256;
pub const ADAPTIVE_CLAMP: (f64, f64) = (0.3, 0.9);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Mean,
    MajorityVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum ThresholdPolicy {
    /// Interior wins where its probability is at least `t`.
    Fixed { t: f64 },
    /// Otsu threshold on the scene's interior-probability histogram.
    Adaptive,
    /// Plain argmax over all classes.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub trials: usize,
    pub inference_dropout_rate: f64,
    pub aggregation: Aggregation,
    pub threshold: ThresholdPolicy,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            trials: 10,
            inference_dropout_rate: 0.1,
            aggregation: Aggregation::Mean,
            threshold: ThresholdPolicy::Fixed { t: DEFAULT_THRESHOLD },
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return config_err("trials must be at least 1");
        }
        if !(0.0..1.0).contains(&self.inference_dropout_rate) {
            return config_err("inference_dropout_rate must lie in [0,1)");
        }
        if let ThresholdPolicy::Fixed { t } = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return config_err("fixed threshold must lie in [0,1]");
            }
        }
        Ok(())
    }

    /// Configuration used for the core at grid cell `(r, c)` of a scene.
    pub fn for_tile(&self, r: usize, c: usize) -> McConfig {
        McConfig {
            seed: rng::derive_seed(self.seed, &[r as u64, c as u64]),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEnsembleOutput {
    pub mean_probs: Tensor<f64>,
    pub std_probs: Tensor<f64>,
    /// Predictive entropy of the mean, in nats.
    pub entropy: Tensor<f64>,
    pub mutual_info: Tensor<f64>,
    pub hardened: LabelMask,
    pub threshold_used: f64,
    /// Adaptive thresholding met a degenerate histogram and used the default.
    pub threshold_fallback: bool,
}

impl McEnsembleOutput {
    /// Spread `p99 − p1` of the interior-class probability.
    pub fn probability_range(&self) -> f64 {
        probability_range(self.mean_probs.channel(INTERIOR as usize))
    }
}

/// Nearest-rank `p99 − p1` of a set of probabilities.
pub fn probability_range(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    rank(0.99) - rank(0.01)
}

fn entropy_of(p: impl ExactSizeIterator<Item = f64>) -> f64 {
    let max = (p.len() as f64).ln();
    (-p.filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()).clamp(0.0, max)
}

fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    buf.iter().sum()
}

/// Mean, standard deviation, entropy and mutual information of a stack of
/// per-trial probability maps. Per-pixel sums run over sorted values, so
/// trial order has no effect on any bit of the result.
pub fn aggregate_trials(trials: &[Tensor<f64>]) -> Result<[Tensor<f64>; 4]> {
    let first = trials.first().ok_or_else(|| Error::Config("at least one trial is required".into()))?;
    let (k, h, w) = (first.c, first.h, first.w);
    if trials.iter().any(|t| (t.c, t.h, t.w) != (k, h, w)) {
        return dim_err("trial maps differ in shape");
    }
    let hw = h * w;
    let n = trials.len() as f64;
    let mut mean = Tensor::zeros(k, h, w);
    let mut std = Tensor::zeros(k, h, w);
    let mut ent = Tensor::zeros(1, h, w);
    let mut mi = Tensor::zeros(1, h, w);
    let mut buf = vec![0.0; trials.len()];
    for i in 0..hw {
        let identical = trials[1..]
            .iter()
            .all(|t| (0..k).all(|c| t.data[c * hw + i] == first.data[c * hw + i]));
        if identical {
            for c in 0..k {
                mean.data[c * hw + i] = first.data[c * hw + i];
            }
            ent.data[i] = entropy_of((0..k).map(|c| first.data[c * hw + i]));
            continue;
        }
        for c in 0..k {
            buf.iter_mut().zip(trials).for_each(|(b, t)| *b = t.data[c * hw + i]);
            let m = sorted_sum(&mut buf) / n;
            buf.iter_mut().zip(trials).for_each(|(b, t)| *b = (t.data[c * hw + i] - m).powi(2));
            mean.data[c * hw + i] = m;
            std.data[c * hw + i] = (sorted_sum(&mut buf) / n).sqrt();
        }
        let h_mean = entropy_of((0..k).map(|c| mean.data[c * hw + i]));
        buf.iter_mut()
            .zip(trials)
            .for_each(|(b, t)| *b = entropy_of((0..k).map(|c| t.data[c * hw + i])));
        let h_trials = sorted_sum(&mut buf) / n;
        ent.data[i] = h_mean;
        mi.data[i] = (h_mean - h_trials).clamp(0.0, h_mean);
    }
    Ok([mean, std, ent, mi])
}

/// Threshold maximizing between-class variance of a 256-bin histogram of
/// interior probabilities. When the maximum spans a run of cut points the
/// midpoint of that run is used. Returns `None` for a degenerate histogram.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut hist = [0u64; ADAPTIVE_BINS];
    for &v in values {
        if v.is_finite() {
            hist[((v * ADAPTIVE_BINS as f64) as usize).min(ADAPTIVE_BINS - 1)] += 1;
        }
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let center = |b: usize| (b as f64 + 0.5) / ADAPTIVE_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &n)| n as f64 * center(b)).sum();
    let mut w0 = 0.0;
    let mut s0 = 0.0;
    let mut scores = Vec::with_capacity(ADAPTIVE_BINS - 1);
    for (b, &n) in hist.iter().enumerate().take(ADAPTIVE_BINS - 1) {
        w0 += n as f64;
        s0 += n as f64 * center(b);
        let w1 = total as f64 - w0;
        let score = if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let m0 = s0 / w0;
            let m1 = (sum_all - s0) / w1;
            w0 * w1 * (m0 - m1) * (m0 - m1)
        };
        scores.push(score);
    }
    let best = scores.iter().cloned().fold(0.0, f64::max);
    if best <= 0.0 {
        return None;
    }
    let tol = best * 1e-12;
    let first = scores.iter().position(|&s| s >= best - tol)?;
    let last = scores.iter().rposition(|&s| s >= best - tol)?;
    // Cut after bin b sits at (b + 1)/bins.
    let cut = ((first + last) as f64 / 2.0 + 1.0) / ADAPTIVE_BINS as f64;
    Some(cut.clamp(ADAPTIVE_CLAMP.0, ADAPTIVE_CLAMP.1))
}

/// Resolves a policy into `(threshold, fallback)`; `None` means argmax.
pub fn resolve_threshold(mean_probs: &Tensor<f64>, policy: ThresholdPolicy) -> (Option<f64>, bool) {
    match policy {
        ThresholdPolicy::Fixed { t } => (Some(t), false),
        ThresholdPolicy::Argmax => (None, false),
        ThresholdPolicy::Adaptive => match otsu_threshold(mean_probs.channel(INTERIOR as usize)) {
            Some(t) => (Some(t), false),
            None => (Some(DEFAULT_THRESHOLD), true),
        },
    }
}

fn harden_with(p: &Tensor<f64>, t: Option<f64>) -> LabelMask {
    let hw = p.plane();
    let interior = INTERIOR as usize;
    let data = (0..hw)
        .map(|i| {
            let skip = match t {
                Some(t) if p.data[interior * hw + i] >= t => return INTERIOR,
                Some(_) => Some(interior),
                None => None,
            };
            let mut best = BACKGROUND as usize;
            for c in 1..p.c {
                if Some(c) != skip && p.data[c * hw + i] > p.data[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(p.w, p.h, data).unwrap()
}

/// Interior where its probability reaches the threshold, otherwise argmax
/// over the remaining classes (ties toward background).
pub fn harden(mean_probs: &Tensor<f64>, policy: ThresholdPolicy) -> (LabelMask, f64, bool) {
    let (t, fallback) = resolve_threshold(mean_probs, policy);
    (harden_with(mean_probs, t), t.unwrap_or(f64::NAN), fallback)
}

/// Hardens each trial and takes the per-pixel mode. Ties go to background,
/// then to the highest class index, so interior never wins a tie.
pub fn majority_vote(trials: &[Tensor<f64>], t: Option<f64>) -> LabelMask {
    let first = &trials[0];
    let (k, hw) = (first.c, first.plane());
    let mut votes = vec![0u32; k * hw];
    for tr in trials {
        for (i, &v) in harden_with(tr, t).data.iter().enumerate() {
            votes[v as usize * hw + i] += 1;
        }
    }
    let data = (0..hw)
        .map(|i| {
            let top = (0..k).map(|c| votes[c * hw + i]).max().unwrap();
            if votes[i] == top {
                BACKGROUND
            } else {
                (0..k).rev().find(|&c| votes[c * hw + i] == top).unwrap() as u8
            }
        })
        .collect();
    LabelMask::new(first.w, first.h, data).unwrap()
}

fn chip_tensor<T: Real>(chip: &Chip) -> Tensor<T> {
    Tensor::from_vec(chip.bands, chip.height, chip.width, chip.data.iter().map(|&v| T::lit(v as f64)).collect())
}

/// Softmax outputs of every trial; trial `t` uses stream `(seed, t)`.
pub fn run_trials<T: Real>(params: &NetworkParams<T>, chip: &Chip, cfg: &McConfig) -> Result<Vec<Tensor<f64>>> {
    cfg.validate()?;
    let x = chip_tensor::<T>(chip);
    let mode = if cfg.inference_dropout_rate > 0.0 { Mode::Mc } else { Mode::Eval };
    (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = rng::derive_seed(cfg.seed, &[t as u64]);
            let (logits, _) = forward(params, std::slice::from_ref(&x), mode, cfg.inference_dropout_rate, seed)?;
            let p = softmax(&logits[0]);
            let mut q = Tensor::from_vec(p.c, p.h, p.w, p.data.iter().map(|v| v.as_f64()).collect());
            // Re-normalize in double precision.
            let hw = q.plane();
            for i in 0..hw {
                let s: f64 = (0..q.c).map(|c| q.data[c * hw + i]).sum();
                (0..q.c).for_each(|c| q.data[c * hw + i] /= s);
            }
            Ok(q)
        })
        .collect()
}

fn assemble(trials: &[Tensor<f64>], cfg: &McConfig) -> Result<McEnsembleOutput> {
    let [mean_probs, std_probs, entropy, mutual_info] = aggregate_trials(trials)?;
    let (t, fallback) = resolve_threshold(&mean_probs, cfg.threshold);
    let hardened = match cfg.aggregation {
        Aggregation::Mean => harden_with(&mean_probs, t),
        Aggregation::MajorityVote => majority_vote(trials, t),
    };
    Ok(McEnsembleOutput {
        mean_probs,
        std_probs,
        entropy,
        mutual_info,
        hardened,
        threshold_used: t.unwrap_or(f64::NAN),
        threshold_fallback: fallback,
    })
}

pub fn mc_predict<T: Real>(params: &NetworkParams<T>, chip: &Chip, cfg: &McConfig) -> Result<McEnsembleOutput> {
    let trials = run_trials(params, chip, cfg)?;
    assemble(&trials, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileScheme {
    pub core_size: usize,
    pub input_size: usize,
}

impl TileScheme {
    pub fn overlap(&self) -> usize {
        (self.input_size - self.core_size) / 2
    }

    pub fn validate(&self, factor: usize) -> Result<()> {
        if self.core_size == 0 || self.input_size < self.core_size || !(self.input_size - self.core_size).is_multiple_of(2) {
            return config_err(format!(
                "tile scheme needs input_size >= core_size > 0 with an even difference, got core {} input {}",
                self.core_size, self.input_size
            ));
        }
        if !self.input_size.is_multiple_of(factor) {
            return config_err(format!("input_size must be a multiple of the downsampling factor {}", factor));
        }
        Ok(())
    }

    /// Input window around core `(r, c)`, reflect-padded at scene edges.
    pub fn window(&self, scene: &Chip, r: usize, c: usize) -> Chip {
        let o = self.overlap() as i64;
        let y0 = (r * self.core_size) as i64 - o;
        let x0 = (c * self.core_size) as i64 - o;
        scene.window_reflect(y0, x0, self.input_size, self.input_size)
    }
}

fn crop_tensor(t: &Tensor<f64>, o: usize, size: usize) -> Tensor<f64> {
    let mut out = Tensor::zeros(t.c, size, size);
    for c in 0..t.c {
        for y in 0..size {
            let src = c * t.plane() + (y + o) * t.w + o;
            out.data[c * size * size + y * size..c * size * size + (y + 1) * size].copy_from_slice(&t.data[src..src + size]);
        }
    }
    out
}

fn paste_tensor(dst: &mut Tensor<f64>, src: &Tensor<f64>, y0: usize, x0: usize) {
    for c in 0..src.c {
        for y in 0..src.h {
            let d = c * dst.plane() + (y0 + y) * dst.w + x0;
            dst.data[d..d + src.w].copy_from_slice(&src.data[c * src.plane() + y * src.w..c * src.plane() + (y + 1) * src.w]);
        }
    }
}

/// Predicts every core of the scene from its enlarged window and writes the
/// core regions into a mosaic. Adaptive thresholds are computed once over
/// the stitched interior probabilities.
pub fn predict_scene<T: Real>(params: &NetworkParams<T>, scene: &Chip, tiles: TileScheme, cfg: &McConfig) -> Result<McEnsembleOutput> {
    predict_scene_with(params, scene, tiles, cfg, &|w: &Chip| Ok(w.clone()))
}

/// Window preprocessing hook, applied to every input window before the
/// network sees it (e.g. local normalization).
pub type Preprocess<'a> = &'a (dyn Fn(&Chip) -> Result<Chip> + Sync);

/// [`predict_scene`] with each window passed through `prep` first.
pub fn predict_scene_with<T: Real>(
    params: &NetworkParams<T>,
    scene: &Chip,
    tiles: TileScheme,
    cfg: &McConfig,
    prep: Preprocess<'_>,
) -> Result<McEnsembleOutput> {
    cfg.validate()?;
    tiles.validate(params.arch.downsample_factor())?;
    let cs = tiles.core_size;
    if !scene.height.is_multiple_of(cs) || !scene.width.is_multiple_of(cs) {
        return dim_err(format!("scene {}x{} is not a whole number of {} px cores", scene.height, scene.width, cs));
    }
    let (rows, cols) = (scene.height / cs, scene.width / cs);
    let o = tiles.overlap();
    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let preset = match cfg.threshold {
        ThresholdPolicy::Adaptive => None,
        p => Some(resolve_threshold(&Tensor::zeros(0, 0, 0), p).0),
    };
    let per_tile: Vec<Result<([Tensor<f64>; 4], Option<LabelMask>)>> = cells
        .par_iter()
        .map(|&(r, c)| {
            let tcfg = cfg.for_tile(r, c);
            let trials = run_trials(params, &prep(&tiles.window(scene, r, c))?, &tcfg)?;
            let layers = aggregate_trials(&trials)?;
            let votes = match (cfg.aggregation, preset) {
                (Aggregation::MajorityVote, Some(t)) => {
                    let v = majority_vote(&trials, t);
                    Some(v.crop(o, o, cs, cs)?)
                }
                _ => None,
            };
            Ok((layers.map(|l| crop_tensor(&l, o, cs)), votes))
        })
        .collect();
    let k = params.arch.classes;
    let (h, w) = (scene.height, scene.width);
    let mut mean = Tensor::zeros(k, h, w);
    let mut std = Tensor::zeros(k, h, w);
    let mut ent = Tensor::zeros(1, h, w);
    let mut mi = Tensor::zeros(1, h, w);
    let mut voted = LabelMask::filled(w, h, BACKGROUND);
    for (&(r, c), res) in cells.iter().zip(per_tile) {
        let ([m, s, e, i], v) = res?;
        paste_tensor(&mut mean, &m, r * cs, c * cs);
        paste_tensor(&mut std, &s, r * cs, c * cs);
        paste_tensor(&mut ent, &e, r * cs, c * cs);
        paste_tensor(&mut mi, &i, r * cs, c * cs);
        if let Some(v) = v {
            for y in 0..cs {
                voted.data[(r * cs + y) * w + c * cs..(r * cs + y) * w + (c + 1) * cs].copy_from_slice(&v.data[y * cs..(y + 1) * cs]);
            }
        }
    }
    let (t, fallback) = resolve_threshold(&mean, cfg.threshold);
    let hardened = match (cfg.aggregation, preset) {
        (Aggregation::Mean, _) => harden_with(&mean, t),
        (Aggregation::MajorityVote, Some(_)) => voted,
        (Aggregation::MajorityVote, None) => {
            // Votes need the scene threshold, so trials are replayed.
            let mut out = LabelMask::filled(w, h, BACKGROUND);
            let parts: Vec<Result<LabelMask>> = cells
                .par_iter()
                .map(|&(r, c)| {
                    let trials = run_trials(params, &prep(&tiles.window(scene, r, c))?, &cfg.for_tile(r, c))?;
                    majority_vote(&trials, t).crop(o, o, cs, cs)
                })
                .collect();
            for (&(r, c), v) in cells.iter().zip(parts) {
                let v = v?;
                for y in 0..cs {
                    out.data[(r * cs + y) * w + c * cs..(r * cs + y) * w + (c + 1) * cs].copy_from_slice(&v.data[y * cs..(y + 1) * cs]);
                }
            }
            out
        }
    };
    Ok(McEnsembleOutput {
        mean_probs: mean,
        std_probs: std,
        entropy: ent,
        mutual_info: mi,
        hardened,
        threshold_used: t.unwrap_or(f64::NAN),
        threshold_fallback: fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, ArchSpec};
    use rand::Rng;

    fn arch() -> ArchSpec {
        ArchSpec {
            depth: 2,
            base_width: 4,
            ..ArchSpec::desk()
        }
    }

    fn chip(seed: u64, h: usize, w: usize) -> Chip {
        let mut r = rng::stream(seed, &[]);
        Chip::new(4, h, w, (0..4 * h * w).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    fn probs(k: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(k, h, w, v.to_vec())
    }

    #[test]
    fn zero_rate_gives_degenerate_ensemble() {
        let p = init_params::<f32>(&arch(), 1).unwrap();
        let x = chip(2, 16, 16);
        let cfg = McConfig {
            inference_dropout_rate: 0.0,
            trials: 5,
            ..McConfig::default()
        };
        let out = mc_predict(&p, &x, &cfg).unwrap();
        assert!(out.std_probs.data.iter().all(|&v| v == 0.0));
        assert!(out.mutual_info.data.iter().all(|&v| v == 0.0));
        let det = crate::network::predict_proba(&p, &Tensor::from_chip(&x), 0.0, 0).unwrap();
        // Equal up to the double-precision renormalization of f32 outputs.
        for (a, b) in out.mean_probs.data.iter().zip(&det.data) {
            assert!((*a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_pixel_entropy_is_ln3() {
        let t = probs(3, 1, 1, &[1.0 / 3.0; 3]);
        let [_, _, e, mi] = aggregate_trials(&[t.clone(), t]).unwrap();
        assert!((e.data[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(mi.data[0], 0.0);
    }

    #[test]
    fn three_trial_stack_matches_scalar_oracle() {
        let stack = [[0.7, 0.2, 0.1], [0.5, 0.4, 0.1], [0.2, 0.2, 0.6]];
        let trials: Vec<_> = stack.iter().map(|s| probs(3, 1, 1, s)).collect();
        let [m, s, e, mi] = aggregate_trials(&trials).unwrap();
        // Spreadsheet-style columns.
        let mean = [(0.7 + 0.5 + 0.2) / 3.0, (0.2 + 0.4 + 0.2) / 3.0, (0.1 + 0.1 + 0.6) / 3.0];
        for c in 0..3 {
            assert!((m.data[c] - mean[c]).abs() < 1e-10);
            let var = stack.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / 3.0;
            assert!((s.data[c] - var.sqrt()).abs() < 1e-10);
        }
        let h = |p: &[f64]| -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((e.data[0] - h(&mean)).abs() < 1e-10);
        let expected_mi = h(&mean) - stack.iter().map(|r| h(r)).sum::<f64>() / 3.0;
        assert!((mi.data[0] - expected_mi).abs() < 1e-10);
        assert!(mi.data[0] > 0.0 && mi.data[0] <= e.data[0]);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let p = init_params::<f32>(&arch(), 1).unwrap();
        let cfg = McConfig {
            inference_dropout_rate: 0.3,
            trials: 6,
            ..McConfig::default()
        };
        let mut trials = run_trials(&p, &chip(3, 16, 16), &cfg).unwrap();
        let a = aggregate_trials(&trials).unwrap();
        trials.reverse();
        trials.swap(0, 3);
        let b = aggregate_trials(&trials).unwrap();
        assert_eq!(a, b);
        let hw = 256;
        for i in 0..hw {
            let s: f64 = (0..3).map(|c| a[0].data[c * hw + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(a[3].data[i] >= 0.0 && a[3].data[i] <= a[2].data[i] && a[2].data[i] <= 3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn fixed_threshold_examples() {
        let p = probs(3, 1, 3, &[0.1, 0.2, 0.3, 0.8, 0.75, 0.3, 0.1, 0.05, 0.4]);
        let (m, t, fb) = harden(&p, ThresholdPolicy::Fixed { t: 0.75 });
        assert_eq!((t, fb), (0.75, false));
        // Third pixel: interior 0.3 below t, argmax of the rest is boundary 0.4.
        assert_eq!(m.data, vec![INTERIOR, INTERIOR, 2]);
        let (a, _, _) = harden(&p, ThresholdPolicy::Argmax);
        assert_eq!(a.data, vec![INTERIOR, INTERIOR, 2]);
    }

    #[test]
    fn raising_threshold_never_adds_interior() {
        let mut r = rng::stream(4, &[]);
        let n = 200;
        let mut d = vec![0.0; 3 * n];
        for i in 0..n {
            let a: f64 = r.gen();
            let b: f64 = r.gen::<f64>() * (1.0 - a);
            d[i] = 1.0 - a - b;
            d[n + i] = a;
            d[2 * n + i] = b;
        }
        let p = probs(3, 1, n, &d);
        let mut prev = usize::MAX;
        for k in 0..=20 {
            let (m, _, _) = harden(&p, ThresholdPolicy::Fixed { t: k as f64 / 20.0 });
            let c = m.data.iter().filter(|&&v| v == INTERIOR).count();
            assert!(c <= prev);
            prev = c;
        }
    }

    /// Between-class variance by brute force over candidate cuts.
    fn otsu_oracle(v: &[f64]) -> f64 {
        let mut best = (0.0, Vec::new());
        for k in 1..256 {
            let cut = k as f64 / 256.0;
            let (lo, hi): (Vec<f64>, Vec<f64>) = v.iter().partition(|&&x| x < cut);
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let s = lo.len() as f64 * hi.len() as f64 * (m(&lo) - m(&hi)).powi(2);
            if s > best.0 * (1.0 + 1e-9) {
                best = (s, vec![cut]);
            } else if (s - best.0).abs() <= best.0 * 1e-9 {
                best.1.push(cut);
            }
        }
        (best.1[0] + best.1[best.1.len() - 1]) / 2.0
    }

    #[test]
    fn bimodal_adaptive_threshold_is_central() {
        let v: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let t = otsu_threshold(&v).unwrap();
        assert!((0.4..=0.6).contains(&t), "{t}");
        assert!((t - otsu_oracle(&v)).abs() < 1e-9);
        let mut r = rng::stream(6, &[]);
        let v: Vec<f64> = (0..2000)
            .map(|i| {
                let c = if i % 3 == 0 { 0.8 } else { 0.35 };
                (c + 0.08 * (r.gen::<f64>() - 0.5)).clamp(0.0, 1.0)
            })
            .collect();
        // Bin centers versus raw values shift the optimum by at most one bin.
        assert!((otsu_threshold(&v).unwrap() - otsu_oracle(&v)).abs() <= 1.0 / 256.0 + 1e-12);
    }

    #[test]
    fn adaptive_threshold_is_clamped_and_falls_back() {
        assert_eq!(otsu_threshold(&[0.5; 10]), None);
        assert_eq!(otsu_threshold(&[]), None);
        let v: Vec<f64> = (0..100).map(|i| if i < 50 { 0.96 } else { 0.99 }).collect();
        assert_eq!(otsu_threshold(&v), Some(0.9));
        let p = probs(3, 1, 2, &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
        let (_, t, fb) = harden(&p, ThresholdPolicy::Adaptive);
        assert_eq!((t, fb), (DEFAULT_THRESHOLD, true));
    }

    #[test]
    fn majority_vote_breaks_ties_toward_background() {
        let a = probs(3, 1, 2, &[0.9, 0.05, 0.05, 0.9, 0.05, 0.05]);
        let b = probs(3, 1, 2, &[0.1, 0.05, 0.8, 0.9, 0.05, 0.05]);
        let m = majority_vote(&[a.clone(), b.clone()], Some(0.75));
        assert_eq!(m.data, vec![BACKGROUND, INTERIOR]);
        let c = probs(3, 1, 1, &[0.1, 0.1, 0.8]);
        let d = probs(3, 1, 1, &[0.1, 0.8, 0.1]);
        assert_eq!(majority_vote(&[c, d], Some(0.75)).data, vec![2]);
    }

    #[test]
    fn tiled_prediction_matches_per_window_runs() {
        let p = init_params::<f32>(&arch(), 7).unwrap();
        let scene = chip(8, 32, 48);
        let tiles = TileScheme {
            core_size: 16,
            input_size: 24,
        };
        for aggregation in [Aggregation::Mean, Aggregation::MajorityVote] {
            let cfg = McConfig {
                trials: 3,
                inference_dropout_rate: 0.2,
                aggregation,
                seed: 5,
                ..McConfig::default()
            };
            let out = predict_scene(&p, &scene, tiles, &cfg).unwrap();
            for r in 0..2 {
                for c in 0..3 {
                    let single = mc_predict(&p, &tiles.window(&scene, r, c), &cfg.for_tile(r, c)).unwrap();
                    let core = crop_tensor(&single.mean_probs, 4, 16);
                    for ch in 0..3 {
                        for y in 0..16 {
                            for x in 0..16 {
                                let a = out.mean_probs.data[ch * 32 * 48 + (r * 16 + y) * 48 + c * 16 + x];
                                assert_eq!(a, core.data[ch * 256 + y * 16 + x]);
                            }
                        }
                    }
                    assert_eq!(crop_tensor(&single.mutual_info, 4, 16), crop_tensor_at(&out.mutual_info, r * 16, c * 16, 16));
                    let hm = single.hardened.crop(4, 4, 16, 16).unwrap();
                    assert_eq!(hm, out.hardened.crop(r * 16, c * 16, 16, 16).unwrap());
                }
            }
        }
    }

    fn crop_tensor_at(t: &Tensor<f64>, y0: usize, x0: usize, s: usize) -> Tensor<f64> {
        let mut out = Tensor::zeros(t.c, s, s);
        for c in 0..t.c {
            for y in 0..s {
                for x in 0..s {
                    out.data[c * s * s + y * s + x] = t.data[c * t.plane() + (y0 + y) * t.w + x0 + x];
                }
            }
        }
        out
    }

    #[test]
    fn single_tile_and_disjoint_cases() {
        let p = init_params::<f32>(&arch(), 7).unwrap();
        let cfg = McConfig {
            trials: 2,
            seed: 1,
            ..McConfig::default()
        };
        // Scene equal to one window, overlap 0.
        let scene = chip(9, 16, 16);
        let out = predict_scene(&p, &scene, TileScheme { core_size: 16, input_size: 16 }, &cfg).unwrap();
        let single = mc_predict(&p, &scene, &cfg.for_tile(0, 0)).unwrap();
        assert_eq!(out, single);
        let bad = predict_scene(&p, &chip(1, 20, 16), TileScheme { core_size: 16, input_size: 16 }, &cfg);
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn probability_range_statistic() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        assert!((probability_range(&v) - 0.98).abs() < 1e-12);
        assert_eq!(probability_range(&[0.4; 7]), 0.0);
    }

    #[test]
    fn zero_trials_rejected() {
        let p = init_params::<f32>(&arch(), 7).unwrap();
        let cfg = McConfig {
            trials: 0,
            ..McConfig::default()
        };
        assert!(matches!(mc_predict(&p, &chip(1, 16, 16), &cfg), Err(Error::Config(_))));
    }
}
