//! Raster containers shared by every stage: multi-band imagery chips and
//! class masks.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

pub const BACKGROUND: u8 = 0;
pub const INTERIOR: u8 = 1;
pub const BOUNDARY: u8 = 2;
pub const IGNORE: u8 = 255;

/// Number of semantic classes (background, interior, boundary).
pub const NUM_CLASSES: usize = 3;

/// Where a chip's values came from and how they were scaled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChipProvenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_scheme: Option<String>,
    /// Set when normalization met constant statistics at its scope.
    #[serde(default)]
    pub degenerate: bool,
}

/// A band-sequential `bands × height × width` float raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chip {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub tile_id: String,
    pub year: String,
    /// Pixel offset (row, col) of the chip's top-left corner in its scene.
    pub offset: (i64, i64),
    pub provenance: ChipProvenance,
}

impl Chip {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * height * width {
            return dim_err(format!(
                "chip payload has {} values, expected {}x{}x{}",
                data.len(),
                bands,
                height,
                width
            ));
        }
        Ok(Chip {
            bands,
            height,
            width,
            data,
            tile_id: String::new(),
            year: String::new(),
            offset: (0, 0),
            provenance: ChipProvenance::default(),
        })
    }

    pub fn filled(bands: usize, height: usize, width: usize, value: f32) -> Self {
        Chip::new(bands, height, width, vec![value; bands * height * width]).unwrap()
    }

    pub fn with_tag(mut self, tile_id: impl Into<String>, year: impl Into<String>) -> Self {
        self.tile_id = tile_id.into();
        self.year = year.into();
        self
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// Copies a window; the window must lie inside the chip.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Chip> {
        if y0 + h > self.height || x0 + w > self.width {
            return dim_err(format!(
                "crop {}x{} at ({},{}) exceeds {}x{} chip",
                h, w, y0, x0, self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(self.bands * h * w);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        let mut out = Chip::new(self.bands, h, w, data)?;
        out.tile_id = self.tile_id.clone();
        out.year = self.year.clone();
        out.offset = (self.offset.0 + y0 as i64, self.offset.1 + x0 as i64);
        out.provenance = self.provenance.clone();
        Ok(out)
    }

    /// Window of size `h × w` whose top-left is at (y0, x0), which may fall
    /// outside the chip; out-of-range pixels are mirrored (edge not repeated).
    pub fn window_reflect(&self, y0: i64, x0: i64, h: usize, w: usize) -> Chip {
        let mut data = Vec::with_capacity(self.bands * h * w);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in 0..h {
                let sy = reflect_index(y0 + y as i64, self.height);
                for x in 0..w {
                    let sx = reflect_index(x0 + x as i64, self.width);
                    data.push(plane[sy * self.width + sx]);
                }
            }
        }
        let mut out = Chip::new(self.bands, h, w, data).unwrap();
        out.tile_id = self.tile_id.clone();
        out.year = self.year.clone();
        out.offset = (self.offset.0 + y0, self.offset.1 + x0);
        out.provenance = self.provenance.clone();
        out
    }
}

/// Mirror-reflects an index into `[0, n)` without repeating the edge pixel.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// An `height × width` class raster with codes {0, 1, 2, 255}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return dim_err(format!(
                "mask payload has {} values, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(LabelMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        LabelMask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Loss-mask view: `true` where the pixel takes part in losses and metrics.
    pub fn valid(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != IGNORE).collect()
    }

    /// Pixel counts for (background, interior, boundary, ignore).
    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0usize; 4];
        for &v in &self.data {
            match v {
                BACKGROUND => c[0] += 1,
                INTERIOR => c[1] += 1,
                BOUNDARY => c[2] += 1,
                _ => c[3] += 1,
            }
        }
        c
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMask> {
        if y0 + h > self.height || x0 + w > self.width {
            return dim_err(format!(
                "crop {}x{} at ({},{}) exceeds {}x{} mask",
                h, w, y0, x0, self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMask::new(w, h, data)
    }
}
