//! Synthetic multi-year agricultural scenes with controllable per-band
//! covariate shift.
//!
//! Field layout comes from Voronoi cells of Poisson-scattered sites; each
//! subsequent year churns a fraction of the fields. Imagery is a per-band
//! reflectance model (vegetated fields vs textured background) pushed through
//! a per-year affine brightness transform plus sensor noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::labeling::{buffer_instances, pad_with_ignore, rasterize_instances, Polygon};
use crate::raster::{Chip, LabelMask};
use crate::rng;

/// Per-year brightness drift applied to the base imagery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearShift {
    pub year_tag: String,
    pub band_mean_offset: Vec<f32>,
    pub band_std_scale: Vec<f32>,
    pub noise_sigma: f32,
    /// 3x3 box-filter passes applied before the shift; models a composite
    /// built with a different (temporally averaged) acquisition method.
    #[serde(default)]
    pub smoothing_passes: u32,
}

impl YearShift {
    pub fn identity(year_tag: impl Into<String>, bands: usize) -> Self {
        YearShift {
            year_tag: year_tag.into(),
            band_mean_offset: vec![0.0; bands],
            band_std_scale: vec![1.0; bands],
            noise_sigma: 0.0,
            smoothing_passes: 0,
        }
    }

    fn validate(&self, bands: usize) -> Result<()> {
        if self.band_mean_offset.len() != bands || self.band_std_scale.len() != bands {
            return config_err(format!(
                "year {}: shift vectors must have band_count={} entries",
                self.year_tag, bands
            ));
        }
        if self.band_std_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return config_err(format!(
                "year {}: band_std_scale must be strictly positive",
                self.year_tag
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return config_err(format!("year {}: noise_sigma must be >= 0", self.year_tag));
        }
        Ok(())
    }
}

/// Base reflectance model. Vectors are per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceModel {
    pub background_mean: Vec<f32>,
    pub field_mean: Vec<f32>,
    /// Per-field, per-band standard deviation around `field_mean`.
    pub field_jitter: f32,
    /// Amplitude of the low-frequency background texture.
    pub texture_amplitude: f32,
    /// Wavelength in pixels of the coarsest texture octave.
    pub texture_scale_px: f32,
    /// Fine per-pixel texture standard deviation (fixed across years).
    pub pixel_texture: f32,
}

impl ReflectanceModel {
    /// Blue, green, red, NIR: soil-like background vs vegetated fields.
    pub fn four_band() -> Self {
        ReflectanceModel {
            background_mean: vec![0.10, 0.12, 0.16, 0.28],
            field_mean: vec![0.08, 0.11, 0.10, 0.36],
            field_jitter: 0.02,
            texture_amplitude: 0.05,
            texture_scale_px: 48.0,
            pixel_texture: 0.01,
        }
    }

    pub fn for_bands(bands: usize) -> Self {
        if bands == 4 {
            return Self::four_band();
        }
        let base = Self::four_band();
        let pick = |v: &[f32], b: usize| v[b.min(3)];
        ReflectanceModel {
            background_mean: (0..bands).map(|b| pick(&base.background_mean, b)).collect(),
            field_mean: (0..bands).map(|b| pick(&base.field_mean, b)).collect(),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scene_size_px: usize,
    #[serde(default = "default_bands")]
    pub band_count: usize,
    pub field_density: f64,
    pub mean_field_diameter_px: usize,
    pub churn_fraction: f64,
    pub years: Vec<YearShift>,
    pub seed: u64,
    /// Width of the background gap carved between neighbouring fields.
    #[serde(default = "default_gap")]
    pub field_gap_px: f64,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
    #[serde(default)]
    pub reflectance: Option<ReflectanceModel>,
}

fn default_bands() -> usize {
    4
}
fn default_gap() -> f64 {
    1.0
}
fn default_downsample() -> usize {
    8
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scene_size_px < 64 {
            return config_err("scene_size_px must be >= 64");
        }
        if self.downsample_factor == 0 || !self.scene_size_px.is_multiple_of(self.downsample_factor) {
            return config_err(format!(
                "scene_size_px {} must be divisible by the downsampling factor {}",
                self.scene_size_px, self.downsample_factor
            ));
        }
        if self.band_count == 0 {
            return config_err("band_count must be positive");
        }
        if !(0.0..=1.0).contains(&self.field_density) {
            return config_err("field_density must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.churn_fraction) {
            return config_err("churn_fraction must lie in [0,1]");
        }
        if self.mean_field_diameter_px == 0 {
            return config_err("mean_field_diameter_px must be positive");
        }
        if !(self.field_gap_px >= 0.0) {
            return config_err("field_gap_px must be >= 0");
        }
        if self.years.is_empty() {
            return config_err("at least one year is required");
        }
        for y in &self.years {
            y.validate(self.band_count)?;
        }
        let refl = self.reflectance();
        if refl.background_mean.len() != self.band_count || refl.field_mean.len() != self.band_count {
            return config_err("reflectance model vectors must have band_count entries");
        }
        Ok(())
    }

    pub fn reflectance(&self) -> ReflectanceModel {
        self.reflectance
            .clone()
            .unwrap_or_else(|| ReflectanceModel::for_bands(self.band_count))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    /// Full-scene imagery per year, in config order.
    pub imagery: Vec<Chip>,
    /// Field polygons per year.
    pub field_polygons: Vec<Vec<Polygon>>,
    pub config: SceneConfig,
}

impl Scene {
    pub fn year_tags(&self) -> Vec<String> {
        self.config.years.iter().map(|y| y.year_tag.clone()).collect()
    }

    pub fn year_index(&self, tag: &str) -> Option<usize> {
        self.config.years.iter().position(|y| y.year_tag == tag)
    }

    /// Full-scene 3-class reference mask for one year.
    pub fn label_mask(&self, year: usize, thickness_px: i64) -> Result<LabelMask> {
        let s = self.config.scene_size_px;
        let ids = rasterize_instances(&self.field_polygons[year], s, s)?;
        buffer_instances(&ids, s, s, thickness_px)
    }
}

fn clip_halfplane(poly: &[[f64; 2]], n: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    // Keeps points with n·p <= c.
    let mut out = Vec::with_capacity(poly.len() + 1);
    let k = poly.len();
    for i in 0..k {
        let a = poly[i];
        let b = poly[(i + 1) % k];
        let da = n[0] * a[0] + n[1] * a[1] - c;
        let db = n[0] * b[0] + n[1] * b[1] - c;
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Voronoi cell of `sites[i]` inside `[0,size]²`, shrunk by `gap/2` along
/// every bisector so neighbouring cells are separated by `gap`.
fn voronoi_cell(sites: &[[f64; 2]], i: usize, size: f64, gap: f64, order: &mut Vec<(f64, usize)>) -> Vec<[f64; 2]> {
    let s = sites[i];
    let mut poly = vec![[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]];
    order.clear();
    order.extend(sites.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, t)| {
        let d = (t[0] - s[0]).powi(2) + (t[1] - s[1]).powi(2);
        (d, j)
    }));
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &(d2, j) in order.iter() {
        let reach = poly
            .iter()
            .map(|p| (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2))
            .fold(0.0, f64::max)
            .sqrt();
        if d2.sqrt() > 2.0 * reach + gap {
            break;
        }
        let t = sites[j];
        let d = d2.sqrt();
        if d == 0.0 {
            continue;
        }
        let n = [(t[0] - s[0]) / d, (t[1] - s[1]) / d];
        let mid = [(s[0] + t[0]) * 0.5, (s[1] + t[1]) * 0.5];
        let c = n[0] * mid[0] + n[1] * mid[1] - gap * 0.5;
        poly = clip_halfplane(&poly, n, c);
        if poly.len() < 3 {
            return Vec::new();
        }
    }
    dedup_vertices(poly)
}

fn dedup_vertices(poly: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if let Some(q) = out.last() {
            if (q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9 {
                continue;
            }
        }
        out.push(p);
    }
    while out.len() > 1 {
        let (f, l) = (out[0], out[out.len() - 1]);
        if (f[0] - l[0]).abs() < 1e-9 && (f[1] - l[1]).abs() < 1e-9 {
            out.pop();
        } else {
            break;
        }
    }
    out
}

struct Layout {
    cells: Vec<Polygon>,
    /// Per-cell, per-band field reflectance.
    cell_reflectance: Vec<Vec<f32>>,
    fields_per_year: Vec<Vec<bool>>,
}

fn build_layout(cfg: &SceneConfig, refl: &ReflectanceModel) -> Layout {
    let size = cfg.scene_size_px as f64;
    let mut rng = rng::stream(cfg.seed, &[1]);
    let d = cfg.mean_field_diameter_px as f64;
    let lambda = size * size / (std::f64::consts::PI * d * d / 4.0);
    let count = (Poisson::new(lambda).unwrap().sample(&mut rng) as usize).max(1);
    let sites: Vec<[f64; 2]> = (0..count)
        .map(|_| [rng.gen::<f64>() * size, rng.gen::<f64>() * size])
        .collect();
    let mut order = Vec::with_capacity(count);
    let mut cells = Vec::with_capacity(count);
    for i in 0..count {
        let v = voronoi_cell(&sites, i, size, cfg.field_gap_px, &mut order);
        let p = Polygon(v);
        if p.0.len() >= 3 && p.area() >= 1.0 {
            cells.push(p);
        }
    }
    let jitter = Normal::new(0.0f32, refl.field_jitter.max(0.0)).unwrap();
    let cell_reflectance: Vec<Vec<f32>> = cells
        .iter()
        .map(|_| {
            // One shared vigour draw plus small per-band deviations keeps bands correlated.
            let vigour: f32 = jitter.sample(&mut rng);
            refl.field_mean
                .iter()
                .map(|&m| m + vigour + 0.3 * jitter.sample(&mut rng))
                .collect()
        })
        .collect();

    // Base year: random priority, add cells until the covered area is closest
    // to the target density.
    let target = cfg.field_density * size * size;
    let priority: Vec<f64> = cells.iter().map(|_| rng.gen()).collect();
    let mut idx: Vec<usize> = (0..cells.len()).collect();
    idx.sort_by(|&a, &b| priority[a].partial_cmp(&priority[b]).unwrap());
    let mut is_field = vec![false; cells.len()];
    let mut covered = 0.0;
    for &i in &idx {
        let a = cells[i].area();
        if (covered + a - target).abs() <= (covered - target).abs() {
            is_field[i] = true;
            covered += a;
        } else if covered + a > target {
            break;
        }
    }
    let mut fields_per_year = vec![is_field];
    for k in 1..cfg.years.len() {
        let prev = fields_per_year[k - 1].clone();
        let mut rng = rng::stream(cfg.seed, &[2, k as u64]);
        fields_per_year.push(churn(&prev, cfg.churn_fraction, &mut rng));
    }
    Layout {
        cells,
        cell_reflectance,
        fields_per_year,
    }
}

/// Replaces `churn_fraction` of the fields: half of them are dropped and the
/// rest added from non-field cells, so the symmetric difference is
/// `round(churn_fraction · |fields|)`.
fn churn(prev: &[bool], churn_fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let fields: Vec<usize> = (0..prev.len()).filter(|&i| prev[i]).collect();
    let empty: Vec<usize> = (0..prev.len()).filter(|&i| !prev[i]).collect();
    let total = (churn_fraction * fields.len() as f64).round() as usize;
    let drop = (total / 2).min(fields.len());
    let add = (total - drop).min(empty.len());
    let mut next = prev.to_vec();
    for &i in rand::seq::index::sample(rng, fields.len(), drop).iter().map(|j| &fields[j]) {
        next[i] = false;
    }
    for &i in rand::seq::index::sample(rng, empty.len(), add).iter().map(|j| &empty[j]) {
        next[i] = true;
    }
    next
}

/// Smooth value noise in roughly [-1, 1]: bilinear-interpolated random lattice
/// with smoothstep weights, two octaves.
fn value_noise(size: usize, wavelength: f32, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    for (octave, amp) in [(1.0f32, 0.7f32), (0.35, 0.3)] {
        let cell = (wavelength * octave).max(2.0);
        let n = (size as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        for y in 0..size {
            let fy = y as f32 / cell;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..size {
                let fx = x as f32 / cell;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let a = lattice[iy * n + ix];
                let b = lattice[iy * n + ix + 1];
                let c = lattice[(iy + 1) * n + ix];
                let d = lattice[(iy + 1) * n + ix + 1];
                let top = a + (b - a) * sx;
                let bot = c + (d - c) * sx;
                out[y * size + x] += amp * (top + (bot - top) * sy);
            }
        }
    }
    out
}

fn box_blur(plane: &mut [f32], h: usize, w: usize) {
    let src = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f32;
            for dy in -1i64..=1 {
                let yy = crate::raster::reflect_index(y as i64 + dy, h);
                for dx in -1i64..=1 {
                    let xx = crate::raster::reflect_index(x as i64 + dx, w);
                    s += src[yy * w + xx];
                }
            }
            plane[y * w + x] = s / 9.0;
        }
    }
}

/// Applies `v' = (v − μ_b)·scale_b + μ_b + offset_b + N(0, σ²)` where μ_b is
/// the chip's own per-band mean.
pub fn apply_year_shift(chip: &Chip, shift: &YearShift, rng: &mut impl Rng) -> Result<Chip> {
    if shift.band_mean_offset.len() != chip.bands || shift.band_std_scale.len() != chip.bands {
        return dim_err(format!(
            "shift has {}/{} band entries for a {}-band chip",
            shift.band_mean_offset.len(),
            shift.band_std_scale.len(),
            chip.bands
        ));
    }
    let mut out = chip.clone();
    out.year = shift.year_tag.clone();
    let noise = if shift.noise_sigma > 0.0 {
        Some(Normal::new(0.0f64, shift.noise_sigma as f64).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    for b in 0..chip.bands {
        let plane = out.band_mut(b);
        let mu = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
        let scale = shift.band_std_scale[b] as f64;
        let offset = shift.band_mean_offset[b] as f64;
        for v in plane.iter_mut() {
            let mut nv = (*v as f64 - mu) * scale + mu + offset;
            if let Some(n) = &noise {
                nv += n.sample(rng);
            }
            *v = nv as f32;
        }
    }
    Ok(out)
}

fn render_year(cfg: &SceneConfig, refl: &ReflectanceModel, layout: &Layout, k: usize) -> Result<Chip> {
    let s = cfg.scene_size_px;
    let bands = cfg.band_count;
    let polys: Vec<Polygon> = layout
        .cells
        .iter()
        .zip(&layout.fields_per_year[k])
        .filter(|(_, &f)| f)
        .map(|(p, _)| p.clone())
        .collect();
    let cell_of: Vec<usize> = layout.fields_per_year[k]
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i)
        .collect();
    let ids = rasterize_instances(&polys, s, s)?;

    // Texture streams are fixed across years so unchanged fields look the same.
    let mut tex_rng = rng::stream(cfg.seed, &[3]);
    let shared = value_noise(s, refl.texture_scale_px, &mut tex_rng);
    let fine = Normal::new(0.0f32, refl.pixel_texture.max(0.0)).unwrap();
    let mut data = vec![0.0f32; bands * s * s];
    for b in 0..bands {
        let mut band_rng = rng::stream(cfg.seed, &[4, b as u64]);
        let own = value_noise(s, refl.texture_scale_px * 0.5, &mut band_rng);
        let plane = &mut data[b * s * s..(b + 1) * s * s];
        for i in 0..s * s {
            let grain = fine.sample(&mut band_rng);
            plane[i] = if ids[i] > 0 {
                layout.cell_reflectance[cell_of[ids[i] as usize - 1]][b] + grain
            } else {
                refl.background_mean[b]
                    + refl.texture_amplitude * (0.8 * shared[i] + 0.4 * own[i])
                    + grain
            };
        }
    }
    let shift = &cfg.years[k];
    for _ in 0..shift.smoothing_passes {
        for b in 0..bands {
            box_blur(&mut data[b * s * s..(b + 1) * s * s], s, s);
        }
    }
    let base = Chip::new(bands, s, s, data)?.with_tag("scene", shift.year_tag.clone());
    let mut noise_rng = rng::stream(cfg.seed, &[5, k as u64]);
    let mut out = apply_year_shift(&base, shift, &mut noise_rng)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Generates every year of a scene. Deterministic in `config.seed`; each year
/// draws from its own stream so appending a year leaves earlier ones intact.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let refl = config.reflectance();
    let layout = build_layout(config, &refl);
    let imagery = (0..config.years.len())
        .into_par_iter()
        .map(|k| render_year(config, &refl, &layout, k))
        .collect::<Result<Vec<_>>>()?;
    let field_polygons = layout
        .fields_per_year
        .iter()
        .map(|f| {
            layout
                .cells
                .iter()
                .zip(f)
                .filter(|(_, &m)| m)
                .map(|(p, _)| p.clone())
                .collect()
        })
        .collect();
    Ok(Scene {
        imagery,
        field_polygons,
        config: config.clone(),
    })
}

/// Grid geometry of an exported chip: core origin and window origin in scene
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChipWindow {
    pub row: usize,
    pub col: usize,
    pub core_y: usize,
    pub core_x: usize,
    pub window_y: usize,
    pub window_x: usize,
}

pub fn chip_grid(scene_size: usize, chip_size: usize, overlap: usize) -> Vec<ChipWindow> {
    let per_axis = (scene_size.saturating_sub(2 * overlap)) / chip_size.max(1);
    let mut out = Vec::with_capacity(per_axis * per_axis);
    for row in 0..per_axis {
        for col in 0..per_axis {
            let core_y = overlap + row * chip_size;
            let core_x = overlap + col * chip_size;
            out.push(ChipWindow {
                row,
                col,
                core_y,
                core_x,
                window_y: core_y - overlap,
                window_x: core_x - overlap,
            });
        }
    }
    out
}

pub fn tile_id(row: usize, col: usize) -> String {
    format!("r{:02}c{:02}", row, col)
}

/// Cuts every year of a scene into overlapping training chips. Each chip is
/// the `(chip_size + 2·overlap)²` input window; its label covers the declared
/// core and the overlap frame is ignore-padded.
pub fn export_chips(
    scene: &Scene,
    chip_size: usize,
    overlap: usize,
    boundary_px: i64,
) -> Result<Vec<(Chip, LabelMask)>> {
    let mut out = Vec::new();
    for k in 0..scene.imagery.len() {
        out.extend(export_year_chips(scene, k, chip_size, overlap, boundary_px)?);
    }
    Ok(out)
}

/// [`export_chips`] restricted to year index `k`.
pub fn export_year_chips(
    scene: &Scene,
    k: usize,
    chip_size: usize,
    overlap: usize,
    boundary_px: i64,
) -> Result<Vec<(Chip, LabelMask)>> {
    let s = scene.config.scene_size_px;
    let window = chip_size + 2 * overlap;
    if chip_size == 0 || window > s {
        return config_err(format!(
            "chip window {} (chip {} + 2x{} overlap) does not fit a {} px scene",
            window, chip_size, overlap, s
        ));
    }
    let f = scene.config.downsample_factor;
    if !window.is_multiple_of(f) {
        return config_err(format!(
            "chip window {} is not divisible by the network downsampling factor {}",
            window, f
        ));
    }
    let img = scene
        .imagery
        .get(k)
        .ok_or_else(|| Error::Config(format!("year index {} out of range", k)))?;
    let labels = scene.label_mask(k, boundary_px)?;
    chip_grid(s, chip_size, overlap)
        .iter()
        .map(|g| {
            let mut chip = img.crop(g.window_y, g.window_x, window, window)?;
            chip.tile_id = tile_id(g.row, g.col);
            chip.year = scene.config.years[k].year_tag.clone();
            let core = labels.crop(g.core_y, g.core_x, chip_size, chip_size)?;
            Ok((chip, pad_with_ignore(&core, window)?))
        })
        .collect()
}
