//! The eight input normalization schemes (min-max / z-value × local / global
//! × all-bands / per-band) and per-band histogram matching.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::raster::Chip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    MinMax,
    ZValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Locality {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandScope {
    AllBands,
    PerBand,
}

/// One of the eight schemes, named by its short code (`mm-lab` … `zv-gpb`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormScheme {
    pub method: Method,
    pub locality: Locality,
    pub band_scope: BandScope,
}

impl NormScheme {
    pub const fn new(method: Method, locality: Locality, band_scope: BandScope) -> Self {
        NormScheme {
            method,
            locality,
            band_scope,
        }
    }

    /// All eight schemes, min-max first.
    pub fn all() -> Vec<NormScheme> {
        let mut v = Vec::with_capacity(8);
        for m in [Method::MinMax, Method::ZValue] {
            for l in [Locality::Local, Locality::Global] {
                for s in [BandScope::AllBands, BandScope::PerBand] {
                    v.push(NormScheme::new(m, l, s));
                }
            }
        }
        v
    }

    pub fn code(&self) -> String {
        let m = match self.method {
            Method::MinMax => "mm",
            Method::ZValue => "zv",
        };
        let l = match self.locality {
            Locality::Local => "l",
            Locality::Global => "g",
        };
        let s = match self.band_scope {
            BandScope::AllBands => "ab",
            BandScope::PerBand => "pb",
        };
        format!("{m}-{l}{s}")
    }
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown normalization scheme '{s}'"));
        let (m, rest) = s.split_once('-').ok_or_else(bad)?;
        let method = match m {
            "mm" => Method::MinMax,
            "zv" => Method::ZValue,
            _ => return Err(bad()),
        };
        let (locality, band_scope) = match rest {
            "lab" => (Locality::Local, BandScope::AllBands),
            "lpb" => (Locality::Local, BandScope::PerBand),
            "gab" => (Locality::Global, BandScope::AllBands),
            "gpb" => (Locality::Global, BandScope::PerBand),
            _ => return Err(bad()),
        };
        Ok(NormScheme::new(method, locality, band_scope))
    }
}

impl Serialize for NormScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for NormScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Streaming count/mean/M2/min/max with an exact associative merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accumulator {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for Accumulator {
    fn default() -> Self {
        Accumulator {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Accumulator {
    #[inline]
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn merge(&self, other: &Accumulator) -> Accumulator {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        Accumulator {
            count: n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    fn finish(&self) -> ScopeStats {
        ScopeStats {
            min: self.min,
            max: self.max,
            mean: self.mean,
            std: self.std(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Statistics at one band scope: a single entry for all-bands pooling,
/// one per band otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub band_scope: BandScope,
    pub scopes: Vec<ScopeStats>,
    pub sample_count: u64,
}

fn chip_accumulators(chip: &Chip, scope: BandScope) -> Vec<Accumulator> {
    match scope {
        BandScope::AllBands => {
            let mut a = Accumulator::default();
            chip.data.iter().for_each(|&v| a.push(v as f64));
            vec![a]
        }
        BandScope::PerBand => (0..chip.bands)
            .map(|b| {
                let mut a = Accumulator::default();
                chip.band(b).iter().for_each(|&v| a.push(v as f64));
                a
            })
            .collect(),
    }
}

fn stats_from(accs: &[Accumulator], scope: BandScope) -> NormStats {
    NormStats {
        band_scope: scope,
        scopes: accs.iter().map(Accumulator::finish).collect(),
        sample_count: accs.iter().map(|a| a.count).sum(),
    }
}

/// Dataset statistics at the scheme's band scope. Chips are reduced in
/// parallel and merged in input order, so the result is thread-count
/// independent.
pub fn compute_stats<'a, I>(dataset: I, scheme: NormScheme) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a Chip>,
{
    let chips: Vec<&Chip> = dataset.into_iter().collect();
    if chips.is_empty() {
        if scheme.locality == Locality::Local {
            return Ok(NormStats {
                band_scope: scheme.band_scope,
                scopes: Vec::new(),
                sample_count: 0,
            });
        }
        return Err(Error::Statistics("cannot compute global statistics of an empty dataset".into()));
    }
    let bands = chips[0].bands;
    if chips.iter().any(|c| c.bands != bands) {
        return dim_err("dataset chips disagree on band count");
    }
    let per_chip: Vec<Vec<Accumulator>> = chips
        .par_iter()
        .map(|c| chip_accumulators(c, scheme.band_scope))
        .collect();
    let merged = per_chip
        .into_iter()
        .reduce(|a, b| a.iter().zip(&b).map(|(x, y)| x.merge(y)).collect())
        .unwrap();
    Ok(stats_from(&merged, scheme.band_scope))
}

fn apply_scope(plane: &mut [f32], method: Method, s: &ScopeStats) -> bool {
    match method {
        Method::MinMax => {
            let range = s.max - s.min;
            if range <= 0.0 {
                plane.iter_mut().for_each(|v| *v = 0.0);
                return true;
            }
            plane.iter_mut().for_each(|v| *v = ((*v as f64 - s.min) / range) as f32);
        }
        Method::ZValue => {
            if s.std <= 0.0 {
                plane.iter_mut().for_each(|v| *v = 0.0);
                return true;
            }
            plane.iter_mut().for_each(|v| *v = ((*v as f64 - s.mean) / s.std) as f32);
        }
    }
    false
}

/// Normalizes one chip. Local schemes take statistics from the chip itself;
/// global schemes need the frozen dataset statistics. Constant statistics at
/// a scope map that scope to 0 and set the chip's degenerate flag.
pub fn normalize_chip(chip: &Chip, scheme: NormScheme, stats: Option<&NormStats>) -> Result<Chip> {
    let local;
    let stats = match scheme.locality {
        Locality::Local => {
            local = stats_from(&chip_accumulators(chip, scheme.band_scope), scheme.band_scope);
            &local
        }
        Locality::Global => match stats {
            Some(s) => s,
            None => return config_err(format!("scheme {} needs dataset statistics", scheme)),
        },
    };
    if stats.band_scope != scheme.band_scope {
        return config_err(format!("statistics scope does not match scheme {}", scheme));
    }
    let expected = match scheme.band_scope {
        BandScope::AllBands => 1,
        BandScope::PerBand => chip.bands,
    };
    if stats.scopes.len() != expected {
        return dim_err(format!(
            "statistics carry {} scopes, scheme {} on a {}-band chip needs {}",
            stats.scopes.len(),
            scheme,
            chip.bands,
            expected
        ));
    }
    let mut out = chip.clone();
    let mut degenerate = false;
    match scheme.band_scope {
        BandScope::AllBands => degenerate |= apply_scope(&mut out.data, scheme.method, &stats.scopes[0]),
        BandScope::PerBand => {
            for b in 0..chip.bands {
                degenerate |= apply_scope(out.band_mut(b), scheme.method, &stats.scopes[b]);
            }
        }
    }
    out.provenance.norm_scheme = Some(scheme.code());
    out.provenance.degenerate = degenerate;
    Ok(out)
}

/// Optional min-max variant stretching between the given percentiles of the
/// chip (per band or pooled) and clamping to [0, 1]. Off by default.
pub fn percentile_minmax(chip: &Chip, scope: BandScope, lo_pct: f64, hi_pct: f64) -> Result<Chip> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return config_err("percentiles must satisfy 0 <= lo < hi <= 100");
    }
    let pct = |v: &mut Vec<f32>, p: f64| {
        let i = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
        *v.select_nth_unstable_by(i, |a, b| a.total_cmp(b)).1 as f64
    };
    let mut out = chip.clone();
    let mut degenerate = false;
    let mut stretch = |plane: &mut [f32]| {
        let mut sorted = plane.to_vec();
        let (lo, hi) = (pct(&mut sorted, lo_pct), pct(&mut sorted, hi_pct));
        if hi <= lo {
            plane.iter_mut().for_each(|v| *v = 0.0);
            degenerate = true;
        } else {
            plane
                .iter_mut()
                .for_each(|v| *v = (((*v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32);
        }
    };
    match scope {
        BandScope::AllBands => stretch(&mut out.data),
        BandScope::PerBand => {
            for b in 0..chip.bands {
                stretch(out.band_mut(b));
            }
        }
    }
    out.provenance.degenerate = degenerate;
    Ok(out)
}

pub const HISTOGRAM_BINS: usize = 1024;

/// Empirical CDF of one band sampled at 1025 equally spaced bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandHistogram {
    pub lo: f64,
    pub hi: f64,
    /// `cdf[i]` = fraction of samples below edge `i`; `cdf[1024]` = 1.
    pub cdf: Vec<f64>,
}

impl BandHistogram {
    pub fn from_values(values: &[f32]) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        if width > 0.0 {
            for &v in values {
                let k = (((v as f64 - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[k] += 1;
            }
        } else {
            counts[0] = values.len() as u64;
        }
        let n = values.len().max(1) as f64;
        let mut cdf = Vec::with_capacity(HISTOGRAM_BINS + 1);
        let mut acc = 0u64;
        cdf.push(0.0);
        for c in counts {
            acc += c;
            cdf.push(acc as f64 / n);
        }
        BandHistogram { lo, hi, cdf }
    }

    fn width(&self) -> f64 {
        (self.hi - self.lo) / HISTOGRAM_BINS as f64
    }

    fn is_constant(&self) -> bool {
        !(self.hi > self.lo)
    }

    /// Piecewise-linear CDF.
    pub fn cdf_at(&self, v: f64) -> f64 {
        if self.is_constant() {
            return if v < self.lo { 0.0 } else { 1.0 };
        }
        let w = self.width();
        let t = (v - self.lo) / w;
        if t <= 0.0 {
            return 0.0;
        }
        if t >= HISTOGRAM_BINS as f64 {
            return 1.0;
        }
        let k = t as usize;
        let f = t - k as f64;
        self.cdf[k] + f * (self.cdf[k + 1] - self.cdf[k])
    }

    /// Inverse of the piecewise-linear CDF (left-continuous).
    pub fn quantile(&self, u: f64) -> f64 {
        if self.is_constant() {
            return self.lo;
        }
        let u = u.clamp(0.0, 1.0);
        // First edge index j+1 with cdf[j+1] >= u and a non-empty bin j.
        let mut j = self.cdf.partition_point(|&c| c < u).max(1) - 1;
        while j + 1 < self.cdf.len() && self.cdf[j + 1] <= self.cdf[j] {
            j += 1;
        }
        if j >= HISTOGRAM_BINS {
            return self.hi;
        }
        let (c0, c1) = (self.cdf[j], self.cdf[j + 1]);
        let f = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        self.lo + (j as f64 + f) * self.width()
    }
}

/// Per-band reference distribution for histogram matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReference {
    pub bands: Vec<BandHistogram>,
}

impl HistogramReference {
    pub fn from_chip(chip: &Chip) -> Self {
        HistogramReference {
            bands: (0..chip.bands).map(|b| BandHistogram::from_values(chip.band(b))).collect(),
        }
    }

    /// Pools several chips band by band.
    pub fn from_chips(chips: &[&Chip]) -> Result<Self> {
        let Some(first) = chips.first() else {
            return Err(Error::Statistics("no chips to build a reference histogram".into()));
        };
        let bands = (0..first.bands)
            .map(|b| {
                let vals: Vec<f32> = chips.iter().flat_map(|c| c.band(b).iter().copied()).collect();
                BandHistogram::from_values(&vals)
            })
            .collect();
        Ok(HistogramReference { bands })
    }
}

/// Maps each band of `chip` through its own CDF and the reference's inverse
/// CDF. Monotone within a band; a constant reference band maps everything to
/// that constant.
pub fn histogram_match(chip: &Chip, reference: &HistogramReference) -> Result<Chip> {
    if reference.bands.len() != chip.bands {
        return dim_err(format!(
            "reference has {} bands, chip has {}",
            reference.bands.len(),
            chip.bands
        ));
    }
    let mut out = chip.clone();
    for b in 0..chip.bands {
        let src = BandHistogram::from_values(chip.band(b));
        let dst = &reference.bands[b];
        for v in out.band_mut(b).iter_mut() {
            let u = if src.is_constant() { 0.5 } else { src.cdf_at(*v as f64) };
            *v = dst.quantile(u) as f32;
        }
    }
    Ok(out)
}
