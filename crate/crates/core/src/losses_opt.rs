//! Segmentation losses with ignore masking, inverse-frequency class weights,
//! first-order optimizers and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::raster::{LabelMask, IGNORE};
use crate::tensor::{Real, Tensor};

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-4;
/// Floor applied to target-class probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_WEIGHT_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TflConfig {
    /// Weight on false negatives.
    pub alpha: f64,
    /// Weight on false positives.
    pub beta: f64,
    pub gamma: f64,
    pub smooth: f64,
    /// Use `1/gamma` as the exponent instead of `gamma`.
    pub inverse_gamma: bool,
    /// Sum Tversky terms over the whole batch; otherwise per sample, then average.
    pub pooled: bool,
    /// Skip the `alpha + beta = 1` check.
    pub relax_sum: bool,
}

impl Default for TflConfig {
    fn default() -> Self {
        TflConfig {
            alpha: 0.65,
            beta: 0.35,
            gamma: 0.9,
            smooth: 1e-6,
            inverse_gamma: false,
            pooled: true,
            relax_sum: false,
        }
    }
}

impl TflConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return config_err("alpha and beta must be nonnegative");
        }
        if !self.relax_sum && (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return config_err(format!("alpha + beta must equal 1, got {}", self.alpha + self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return config_err("gamma must be positive");
        }
        if !(self.smooth > 0.0) {
            return config_err("smooth must be positive");
        }
        Ok(())
    }

    pub fn exponent(&self) -> f64 {
        if self.inverse_gamma {
            1.0 / self.gamma
        } else {
            self.gamma
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights(vec![1.0; k])
    }

    /// Inverse frequency `T/(K·n_c)`, absent classes and large values capped.
    pub fn from_counts(counts: &[u64], cap: f64) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Statistics("no labelled pixels to derive class weights from".into()));
        }
        let k = counts.len() as f64;
        Ok(ClassWeights(
            counts
                .iter()
                .map(|&n| if n == 0 { cap } else { (total as f64 / (k * n as f64)).min(cap) })
                .collect(),
        ))
    }

    pub fn scaled(&self, s: f64) -> Self {
        ClassWeights(self.0.iter().map(|w| w * s).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Non-ignore pixel counts per class over a set of masks.
pub fn class_pixel_counts<'a>(targets: impl IntoIterator<Item = &'a LabelMask>, k: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; k];
    for t in targets {
        for &v in &t.data {
            if v == IGNORE {
                continue;
            }
            match counts.get_mut(v as usize) {
                Some(c) => *c += 1,
                None => return Err(Error::Input(format!("label {} outside 0..{}", v, k))),
            }
        }
    }
    Ok(counts)
}

/// Weights recomputed from the current batch.
pub fn dynamic_class_weights(targets: &[LabelMask], k: usize, cap: f64) -> Result<ClassWeights> {
    if targets.is_empty() {
        return Err(Error::Statistics("empty batch".into()));
    }
    ClassWeights::from_counts(&class_pixel_counts(targets, k)?, cap)
}

/// Loss value, gradient with respect to the probabilities, and whether the
/// probability floor was hit.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad: Vec<Tensor<T>>,
    pub numeric_floor: bool,
}

fn check_batch<T: Real>(probs: &[Tensor<T>], targets: &[LabelMask], k: usize) -> Result<()> {
    if probs.len() != targets.len() {
        return dim_err(format!("{} probability maps for {} targets", probs.len(), targets.len()));
    }
    for (p, t) in probs.iter().zip(targets) {
        if p.c != k || p.h != t.height || p.w != t.width {
            return dim_err(format!(
                "probabilities {}x{}x{} do not match target {}x{} with {} classes",
                p.c, p.h, p.w, t.height, t.width, k
            ));
        }
        let hw = p.plane();
        for (i, &g) in t.data.iter().enumerate() {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k {
                return Err(Error::Input(format!("label {} outside 0..{}", g, k)));
            }
            let s: f64 = (0..k).map(|c| p.data[c * hw + i].as_f64()).sum();
            if !((s - 1.0).abs() <= PROB_SUM_TOL) {
                return Err(Error::Input(format!("probabilities at pixel {} sum to {}", i, s)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct TverskySums {
    tp: f64,
    fn_: f64,
    fp: f64,
}

fn tversky_sums<T: Real>(p: &Tensor<T>, t: &LabelMask, k: usize, out: &mut [TverskySums]) {
    let hw = p.plane();
    for (c, s) in out.iter_mut().enumerate().take(k) {
        let plane = &p.data[c * hw..(c + 1) * hw];
        for (&pv, &g) in plane.iter().zip(&t.data) {
            if g == IGNORE {
                continue;
            }
            let pv = pv.as_f64();
            if g as usize == c {
                s.tp += pv;
                s.fn_ += 1.0 - pv;
            } else {
                s.fp += pv;
            }
        }
    }
}

/// Per class: Tversky index `TI` and `d loss / d TI`, plus the loss term.
fn tversky_terms(s: &TverskySums, cfg: &TflConfig, w: f64) -> (f64, f64, f64, f64) {
    let num = s.tp + cfg.smooth;
    let den = s.tp + cfg.alpha * s.fn_ + cfg.beta * s.fp + cfg.smooth;
    let ti = num / den;
    let q = cfg.exponent();
    let one_minus = (1.0 - ti).max(0.0);
    let loss = w * one_minus.powf(q);
    let dl_dti = if one_minus > 0.0 {
        -w * q * one_minus.powf(q - 1.0)
    } else {
        0.0
    };
    (loss, dl_dti, num, den)
}

fn tversky_grad<T: Real>(
    p: &Tensor<T>,
    t: &LabelMask,
    coeffs: &[(f64, f64, f64)],
    cfg: &TflConfig,
    scale: f64,
) -> Tensor<T> {
    let hw = p.plane();
    let mut g = Tensor::zeros(p.c, p.h, p.w);
    for (c, &(dl_dti, num, den)) in coeffs.iter().enumerate() {
        // dTI/dp for a target pixel (tp +1, fn −1) and a non-target pixel (fp +1).
        let d_pos = (den - num * (1.0 - cfg.alpha)) / (den * den);
        let d_neg = -num * cfg.beta / (den * den);
        let gp = &mut g.data[c * hw..(c + 1) * hw];
        for (gv, &lab) in gp.iter_mut().zip(&t.data) {
            if lab == IGNORE {
                continue;
            }
            let d = if lab as usize == c { d_pos } else { d_neg };
            *gv = T::lit(scale * dl_dti * d);
        }
    }
    g
}

/// Tversky-focal loss `Σ_c w_c·(1 − TI_c)^γ` over non-ignore pixels.
pub fn tversky_focal_loss<T: Real>(
    probs: &[Tensor<T>],
    targets: &[LabelMask],
    cfg: &TflConfig,
    weights: &ClassWeights,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    let k = weights.len();
    check_batch(probs, targets, k)?;
    if probs.is_empty() {
        return dim_err("empty batch");
    }
    if cfg.pooled {
        let mut sums = vec![TverskySums::default(); k];
        for (p, t) in probs.iter().zip(targets) {
            tversky_sums(p, t, k, &mut sums);
        }
        let mut loss = 0.0;
        let mut coeffs = Vec::with_capacity(k);
        for (c, s) in sums.iter().enumerate() {
            let (l, d, num, den) = tversky_terms(s, cfg, weights.0[c]);
            loss += l;
            coeffs.push((d, num, den));
        }
        let grad = probs
            .iter()
            .zip(targets)
            .map(|(p, t)| tversky_grad(p, t, &coeffs, cfg, 1.0))
            .collect();
        Ok(LossOutput {
            loss,
            grad,
            numeric_floor: false,
        })
    } else {
        let n = probs.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(probs.len());
        for (p, t) in probs.iter().zip(targets) {
            let mut sums = vec![TverskySums::default(); k];
            tversky_sums(p, t, k, &mut sums);
            let mut coeffs = Vec::with_capacity(k);
            for (c, s) in sums.iter().enumerate() {
                let (l, d, num, den) = tversky_terms(s, cfg, weights.0[c]);
                loss += l / n;
                coeffs.push((d, num, den));
            }
            grad.push(tversky_grad(p, t, &coeffs, cfg, 1.0 / n));
        }
        Ok(LossOutput {
            loss,
            grad,
            numeric_floor: false,
        })
    }
}

/// Weighted cross-entropy averaged over non-ignore pixels.
pub fn weighted_ce_loss<T: Real>(probs: &[Tensor<T>], targets: &[LabelMask], weights: &ClassWeights) -> Result<LossOutput<T>> {
    let k = weights.len();
    check_batch(probs, targets, k)?;
    let n: usize = targets.iter().map(|t| t.data.iter().filter(|&&v| v != IGNORE).count()).sum();
    let mut loss = 0.0;
    let mut floor = false;
    let mut grad = Vec::with_capacity(probs.len());
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for (p, t) in probs.iter().zip(targets) {
        let hw = p.plane();
        let mut g = Tensor::zeros(p.c, p.h, p.w);
        for (i, &lab) in t.data.iter().enumerate() {
            if lab == IGNORE {
                continue;
            }
            let c = lab as usize;
            let mut pv = p.data[c * hw + i].as_f64();
            if pv < PROB_FLOOR {
                pv = PROB_FLOOR;
                floor = true;
            }
            let w = weights.0[c];
            loss += -w * pv.ln() * inv_n;
            g.data[c * hw + i] = T::lit(-w / pv * inv_n);
        }
        grad.push(g);
    }
    Ok(LossOutput {
        loss,
        grad,
        numeric_floor: floor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub power: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial_lr: 0.003,
            power: 0.8,
            total_epochs: 120,
        }
    }
}

/// Polynomial decay `initial_lr·(1 − epoch/total)^power`.
pub fn lr_at(s: &LrSchedule, epoch: usize) -> Result<f64> {
    if s.total_epochs == 0 || !(s.initial_lr > 0.0) || !(s.power > 0.0) {
        return config_err("schedule needs positive initial_lr, power and total_epochs");
    }
    if epoch > s.total_epochs {
        return config_err(format!("epoch {} beyond total {}", epoch, s.total_epochs));
    }
    Ok(s.initial_lr * (1.0 - epoch as f64 / s.total_epochs as f64).powf(s.power))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    Sgd,
    Momentum,
    Nesterov,
    Adam,
    Sam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub kind: OptKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rho: f64,
    /// Optimizer driven by the SAM gradient.
    pub sam_inner: OptKind,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            kind: OptKind::Nesterov,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rho: 0.05,
            sam_inner: OptKind::Nesterov,
        }
    }
}

impl OptConfig {
    pub fn with_kind(kind: OptKind) -> Self {
        OptConfig {
            kind,
            ..OptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sam_inner == OptKind::Sam {
            return config_err("SAM cannot wrap itself");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("momentum and Adam betas must lie in [0,1)");
        }
        if !(self.eps > 0.0) || !(self.rho >= 0.0) {
            return config_err("eps must be positive and rho nonnegative");
        }
        Ok(())
    }

    fn step_kind(&self) -> OptKind {
        if self.kind == OptKind::Sam {
            self.sam_inner
        } else {
            self.kind
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub config: OptConfig,
    /// Momentum buffer, or Adam first moment.
    pub m: Vec<T>,
    /// Adam second moment.
    pub v: Vec<T>,
    pub step: u64,
    /// `(start offset, name)` pairs used to name the layer of a bad gradient.
    pub segments: Vec<(usize, String)>,
}

impl<T: Real> OptState<T> {
    pub fn new(config: OptConfig, n: usize) -> Result<Self> {
        config.validate()?;
        let adam = config.step_kind() == OptKind::Adam;
        Ok(OptState {
            config,
            m: vec![T::zero(); n],
            v: if adam { vec![T::zero(); n] } else { Vec::new() },
            step: 0,
            segments: Vec::new(),
        })
    }

    pub fn with_segments(mut self, segments: Vec<(usize, String)>) -> Self {
        self.segments = segments;
        self
    }

    fn locate(&self, i: usize) -> String {
        self.segments
            .iter()
            .rev()
            .find(|(o, _)| *o <= i)
            .map(|(_, n)| n.clone())
            .unwrap_or_else(|| "?".into())
    }

    fn check(&self, params: &[T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return dim_err(format!(
                "optimizer sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in layer {} (index {})", self.locate(i), i)));
        }
        Ok(())
    }

    fn inner_step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        let c = &self.config;
        let lr_t = T::lit(lr);
        let mu = T::lit(c.momentum);
        self.step += 1;
        match c.step_kind() {
            OptKind::Sgd => params.iter_mut().zip(grads).for_each(|(w, &g)| *w = *w - lr_t * g),
            OptKind::Momentum => {
                for ((w, &g), b) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *b = mu * *b + g;
                    *w = *w - lr_t * *b;
                }
            }
            OptKind::Nesterov => {
                for ((w, &g), b) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *b = mu * *b + g;
                    *w = *w - lr_t * (g + mu * *b);
                }
            }
            OptKind::Adam => {
                let (b1, b2) = (c.beta1, c.beta2);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                let step = lr / bc1;
                let eps = T::lit(c.eps);
                let (b1t, b2t) = (T::lit(b1), T::lit(b2));
                let sq = T::lit(bc2.sqrt());
                for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1t * *m + (T::one() - b1t) * g;
                    *v = b2t * *v + (T::one() - b2t) * g * g;
                    *w = *w - T::lit(step) * *m / ((*v).sqrt() / sq + eps);
                }
            }
            OptKind::Sam => unreachable!("validated"),
        }
    }
}

/// One update of the configured first-order rule. For a SAM state this is
/// the inner rule applied to `grads` as given.
pub fn optimizer_step<T: Real>(params: &mut [T], grads: &[T], state: &mut OptState<T>, lr: f64) -> Result<()> {
    state.check(params, grads)?;
    state.inner_step(params, grads, lr);
    Ok(())
}

/// Sharpness-aware step: gradients are re-evaluated at `w + ρ·g/‖g‖` and the
/// inner rule updates the original parameters with them.
pub fn sam_step<T: Real, F>(params: &mut [T], mut grad_fn: F, state: &mut OptState<T>, lr: f64) -> Result<()>
where
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    let g1 = grad_fn(params)?;
    state.check(params, &g1)?;
    let norm = g1.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    let rho = state.config.rho;
    if norm == 0.0 || rho == 0.0 {
        state.inner_step(params, &g1, lr);
        return Ok(());
    }
    let s = T::lit(rho / norm);
    let perturbed: Vec<T> = params.iter().zip(&g1).map(|(&w, &g)| w + s * g).collect();
    let g2 = grad_fn(&perturbed)?;
    state.check(params, &g2)?;
    state.inner_step(params, &g2, lr);
    Ok(())
}
