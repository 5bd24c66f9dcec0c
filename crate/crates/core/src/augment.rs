//! On-the-fly augmentation chain: flip → rotation → resize → photometric.
//! Geometric stages move chip and mask together; photometric stages touch
//! imagery only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::raster::{Chip, LabelMask, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipMode {
    Horizontal,
    Vertical,
    /// Main-diagonal reflection (transpose).
    Diagonal,
    AntiDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhotometricMode {
    Gamma,
    GaussianNoise,
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability that each stage fires, drawn independently per stage.
    pub apply_probability: f64,
    pub geometric: bool,
    pub photometric: bool,
    pub flip_modes: Vec<FlipMode>,
    pub rotation_angles: Vec<u32>,
    pub resize_scale_range: [f64; 2],
    pub photometric_modes: Vec<PhotometricMode>,
    pub gamma_range: [f64; 2],
    pub noise_sigma: f64,
    /// Additive offsets drawn from `[-additive_range, additive_range]`.
    pub additive_range: f64,
    pub multiplicative_range: [f64; 2],
    /// Clamp photometric output to [0, 1].
    pub clamp: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            apply_probability: 0.5,
            geometric: true,
            photometric: true,
            flip_modes: vec![FlipMode::Horizontal, FlipMode::Vertical, FlipMode::Diagonal],
            rotation_angles: vec![90, 180, 270],
            resize_scale_range: [0.8, 1.2],
            photometric_modes: vec![
                PhotometricMode::Gamma,
                PhotometricMode::GaussianNoise,
                PhotometricMode::Additive,
                PhotometricMode::Multiplicative,
            ],
            gamma_range: [0.7, 1.4],
            noise_sigma: 0.02,
            additive_range: 0.05,
            multiplicative_range: [0.9, 1.1],
            clamp: true,
        }
    }
}

impl AugmentConfig {
    /// A chain that never fires.
    pub fn disabled() -> Self {
        AugmentConfig {
            apply_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return config_err("apply_probability must lie in [0,1]");
        }
        let ordered = |r: &[f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(&self.resize_scale_range) || self.resize_scale_range[0] <= 0.0 {
            return config_err("resize_scale_range must be a positive, non-empty range");
        }
        if !ordered(&self.gamma_range) || self.gamma_range[0] <= 0.0 {
            return config_err("gamma_range must be a positive, non-empty range");
        }
        if !ordered(&self.multiplicative_range) {
            return config_err("multiplicative_range must be non-empty");
        }
        if self.noise_sigma < 0.0 || self.additive_range < 0.0 {
            return config_err("noise_sigma and additive_range must be >= 0");
        }
        if self.rotation_angles.iter().any(|a| a % 90 != 0) {
            return config_err("rotation angles must be multiples of 90 degrees");
        }
        if self.geometric && (self.flip_modes.is_empty() || self.rotation_angles.is_empty()) {
            return config_err("flip and rotation mode lists must be non-empty");
        }
        if self.photometric && self.photometric_modes.is_empty() {
            return config_err("photometric mode list must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricOp {
    Flip(FlipMode),
    /// Counter-clockwise rotation by `k · 90°`.
    Rotate90(u32),
    Resize(f64),
}

impl GeometricOp {
    /// Parses the kinds `flip-h`, `flip-v`, `flip-diag`, `flip-antidiag`,
    /// `rotate90k` (parameter = k) and `resize` (parameter = scale).
    pub fn parse(kind: &str, parameter: f64) -> Result<Self> {
        Ok(match kind {
            "flip-h" => GeometricOp::Flip(FlipMode::Horizontal),
            "flip-v" => GeometricOp::Flip(FlipMode::Vertical),
            "flip-diag" => GeometricOp::Flip(FlipMode::Diagonal),
            "flip-antidiag" => GeometricOp::Flip(FlipMode::AntiDiagonal),
            "rotate90k" => GeometricOp::Rotate90(parameter.rem_euclid(4.0) as u32),
            "resize" if parameter > 0.0 => GeometricOp::Resize(parameter),
            _ => return config_err(format!("unknown geometric transform '{kind}' ({parameter})")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhotometricOp {
    Gamma(f32),
    GaussianNoise(f32),
    /// Per-band offsets; a single entry applies to every band.
    Additive(Vec<f32>),
    /// Per-band factors; a single entry applies to every band.
    Multiplicative(Vec<f32>),
}

fn check_aligned(chip: &Chip, mask: &LabelMask) -> Result<()> {
    if chip.height != mask.height || chip.width != mask.width {
        return dim_err(format!(
            "chip {}x{} and mask {}x{} are not aligned",
            chip.height, chip.width, mask.height, mask.width
        ));
    }
    Ok(())
}

/// Generic pixel permutation: output (y, x) reads source `map(y, x)`.
fn permute(chip: &Chip, mask: &LabelMask, oh: usize, ow: usize, map: impl Fn(usize, usize) -> (usize, usize)) -> (Chip, LabelMask) {
    let mut data = vec![0.0f32; chip.bands * oh * ow];
    let mut mdata = vec![0u8; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = map(y, x);
            mdata[y * ow + x] = mask.data[sy * mask.width + sx];
            for b in 0..chip.bands {
                data[(b * oh + y) * ow + x] = chip.data[(b * chip.height + sy) * chip.width + sx];
            }
        }
    }
    let mut c = chip.clone();
    c.height = oh;
    c.width = ow;
    c.data = data;
    (c, LabelMask { width: ow, height: oh, data: mdata })
}

fn resize(chip: &Chip, mask: &LabelMask, scale: f64) -> (Chip, LabelMask) {
    let (h, w) = (chip.height, chip.width);
    let mut out = chip.clone();
    let mut m = LabelMask::filled(w, h, IGNORE);
    let src = |o: usize, n: usize| (o as f64 + 0.5 - n as f64 / 2.0) / scale + n as f64 / 2.0 - 0.5;
    for y in 0..h {
        let sy = src(y, h);
        let y_in = sy >= -0.5 && sy <= h as f64 - 0.5;
        let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..w {
            let sx = src(x, w);
            let x_in = sx >= -0.5 && sx <= w as f64 - 0.5;
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            for b in 0..chip.bands {
                let p = chip.band(b);
                let top = p[y0 * w + x0] as f64 + (p[y0 * w + x1] as f64 - p[y0 * w + x0] as f64) * fx;
                let bot = p[y1 * w + x0] as f64 + (p[y1 * w + x1] as f64 - p[y1 * w + x0] as f64) * fx;
                out.data[(b * h + y) * w + x] = (top + (bot - top) * fy) as f32;
            }
            if y_in && x_in {
                let ny = (sy.round().max(0.0) as usize).min(h - 1);
                let nx = (sx.round().max(0.0) as usize).min(w - 1);
                m.data[y * w + x] = mask.data[ny * w + nx];
            }
        }
    }
    (out, m)
}

/// Applies one geometric transform to an aligned chip/mask pair. Flips and
/// rotations are exact permutations; resize is bilinear for imagery and
/// nearest-neighbour for the mask, cropped or ignore-padded back to size.
pub fn geometric_transform(chip: &Chip, mask: &LabelMask, op: GeometricOp) -> Result<(Chip, LabelMask)> {
    check_aligned(chip, mask)?;
    let (h, w) = (chip.height, chip.width);
    Ok(match op {
        GeometricOp::Flip(FlipMode::Horizontal) => permute(chip, mask, h, w, |y, x| (y, w - 1 - x)),
        GeometricOp::Flip(FlipMode::Vertical) => permute(chip, mask, h, w, |y, x| (h - 1 - y, x)),
        GeometricOp::Flip(FlipMode::Diagonal) => permute(chip, mask, w, h, |y, x| (x, y)),
        GeometricOp::Flip(FlipMode::AntiDiagonal) => permute(chip, mask, w, h, |y, x| (h - 1 - x, w - 1 - y)),
        GeometricOp::Rotate90(k) => match k % 4 {
            0 => (chip.clone(), mask.clone()),
            1 => permute(chip, mask, w, h, |y, x| (x, w - 1 - y)),
            2 => permute(chip, mask, h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => permute(chip, mask, w, h, |y, x| (h - 1 - x, y)),
        },
        GeometricOp::Resize(s) => {
            if !(s > 0.0) {
                return config_err(format!("resize scale must be positive, got {s}"));
            }
            resize(chip, mask, s)
        }
    })
}

fn per_band(v: &[f32], b: usize) -> f32 {
    if v.len() == 1 {
        v[0]
    } else {
        v[b]
    }
}

/// Applies one photometric transform; `clamp` limits the result to [0, 1].
pub fn photometric_transform(chip: &Chip, op: &PhotometricOp, clamp: bool, rng: &mut impl Rng) -> Result<Chip> {
    let mut out = chip.clone();
    let check_len = |v: &[f32]| {
        if v.len() != 1 && v.len() != chip.bands {
            dim_err(format!("{} per-band parameters for a {}-band chip", v.len(), chip.bands))
        } else {
            Ok(())
        }
    };
    match op {
        PhotometricOp::Gamma(g) => {
            if chip.data.iter().any(|&v| v < 0.0) {
                return Err(Error::Domain("gamma correction needs non-negative values".into()));
            }
            out.data.iter_mut().for_each(|v| *v = v.powf(*g));
        }
        PhotometricOp::GaussianNoise(sigma) => {
            let n = Normal::new(0.0f32, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
            out.data.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        PhotometricOp::Additive(c) => {
            check_len(c)?;
            for b in 0..chip.bands {
                let c = per_band(c, b);
                out.band_mut(b).iter_mut().for_each(|v| *v += c);
            }
        }
        PhotometricOp::Multiplicative(m) => {
            check_len(m)?;
            for b in 0..chip.bands {
                let m = per_band(m, b);
                out.band_mut(b).iter_mut().for_each(|v| *v *= m);
            }
        }
    }
    if clamp {
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Draws the photometric op a firing stage would apply.
pub fn draw_photometric(cfg: &AugmentConfig, bands: usize, rng: &mut impl Rng) -> PhotometricOp {
    match *cfg.photometric_modes.choose(rng).unwrap() {
        PhotometricMode::Gamma => PhotometricOp::Gamma(uniform(rng, cfg.gamma_range) as f32),
        PhotometricMode::GaussianNoise => PhotometricOp::GaussianNoise(cfg.noise_sigma as f32),
        PhotometricMode::Additive => PhotometricOp::Additive(
            (0..bands)
                .map(|_| uniform(rng, [-cfg.additive_range, cfg.additive_range]) as f32)
                .collect(),
        ),
        PhotometricMode::Multiplicative => PhotometricOp::Multiplicative(
            (0..bands).map(|_| uniform(rng, cfg.multiplicative_range) as f32).collect(),
        ),
    }
}

/// Runs the full chain. Each stage fires independently with
/// `apply_probability` and a firing stage picks one of its modes uniformly.
pub fn augment_pair(chip: &Chip, mask: &LabelMask, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Chip, LabelMask)> {
    check_aligned(chip, mask)?;
    let p = cfg.apply_probability;
    let mut c = chip.clone();
    let mut m = mask.clone();
    if cfg.geometric {
        if rng.gen_bool(p) {
            let mode = *cfg.flip_modes.choose(rng).unwrap();
            (c, m) = geometric_transform(&c, &m, GeometricOp::Flip(mode))?;
        }
        if rng.gen_bool(p) {
            let angle = *cfg.rotation_angles.choose(rng).unwrap();
            (c, m) = geometric_transform(&c, &m, GeometricOp::Rotate90((angle / 90) % 4))?;
        }
        if rng.gen_bool(p) {
            let s = uniform(rng, cfg.resize_scale_range);
            (c, m) = geometric_transform(&c, &m, GeometricOp::Resize(s))?;
        }
    }
    if cfg.photometric && rng.gen_bool(p) {
        let op = draw_photometric(cfg, c.bands, rng);
        c = photometric_transform(&c, &op, cfg.clamp, rng)?;
    }
    Ok((c, m))
}
