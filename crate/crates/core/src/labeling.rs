//! Field polygons to 3-class training masks: scanline rasterization,
//! Chebyshev boundary buffering and ignore padding.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::raster::{LabelMask, BACKGROUND, BOUNDARY, IGNORE, INTERIOR};

/// A closed polygon in pixel coordinates, vertices as `[x, y]`. The closing
/// edge from the last vertex back to the first is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<[f64; 2]>);

impl Polygon {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let v = &self.0;
        let n = v.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            s += a[0] * b[1] - b[0] * a[1];
        }
        (s * 0.5).abs()
    }

    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.0.len();
        (0..n).map(move |i| (self.0[i], self.0[(i + 1) % n]))
    }

    /// Simple-polygon check: at least three vertices, non-zero area, and no
    /// two non-adjacent edges touch or cross.
    pub fn is_simple(&self) -> bool {
        let n = self.0.len();
        if n < 3 || self.area() <= 0.0 {
            return false;
        }
        let e: Vec<_> = self.edges().collect();
        for i in 0..n {
            if e[i].0 == e[i].1 {
                return false;
            }
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Adjacent edges may only share their common vertex.
                    if n > 3 && collinear_overlap(e[i], e[j]) {
                        return false;
                    }
                    continue;
                }
                if segments_touch(e[i], e[j]) {
                    return false;
                }
            }
        }
        true
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.0.iter().all(|p| {
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 && p[1] <= height as f64
        })
    }

    /// Even-odd point-in-polygon by ray casting.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] <= y) != (b[1] <= y) {
                let xi = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(s: ([f64; 2], [f64; 2]), t: ([f64; 2], [f64; 2])) -> bool {
    let (p1, p2) = s;
    let (p3, p4) = t;
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(p3, p4, p1))
        || (d2 == 0.0 && on_segment(p3, p4, p2))
        || (d3 == 0.0 && on_segment(p1, p2, p3))
        || (d4 == 0.0 && on_segment(p1, p2, p4))
}

fn collinear_overlap(s: ([f64; 2], [f64; 2]), t: ([f64; 2], [f64; 2])) -> bool {
    // s.1 == t.0 (or s.0 == t.1): folding back onto itself.
    let (shared, a, b) = if s.1 == t.0 {
        (s.1, s.0, t.1)
    } else {
        (s.0, s.1, t.0)
    };
    if orient(shared, a, b) != 0.0 {
        return false;
    }
    let da = [a[0] - shared[0], a[1] - shared[1]];
    let db = [b[0] - shared[0], b[1] - shared[1]];
    da[0] * db[0] + da[1] * db[1] > 0.0
}

fn validate(polygons: &[Polygon], width: usize, height: usize) -> Result<()> {
    for (index, p) in polygons.iter().enumerate() {
        if !p.is_simple() {
            return Err(Error::Geometry {
                index,
                reason: "polygon is not simple".into(),
            });
        }
        if !p.within(width, height) {
            return Err(Error::Geometry {
                index,
                reason: format!("polygon leaves the {}x{} raster", width, height),
            });
        }
    }
    Ok(())
}

/// Instance raster: 0 where no polygon covers the pixel centre, otherwise
/// `index + 1` of the last polygon (in list order) whose interior contains it.
pub fn rasterize_instances(polygons: &[Polygon], width: usize, height: usize) -> Result<Vec<u32>> {
    validate(polygons, width, height)?;
    let mut ids = vec![0u32; width * height];
    let mut xs: Vec<f64> = Vec::new();
    for (index, poly) in polygons.iter().enumerate() {
        let (ymin, ymax) = poly
            .vertices()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let row_lo = ((ymin - 0.5).ceil().max(0.0)) as usize;
        let row_hi = ((ymax - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
        if row_hi < 0.0 {
            continue;
        }
        for y in row_lo..=row_hi as usize {
            let yc = y as f64 + 0.5;
            xs.clear();
            for (a, b) in poly.edges() {
                if (a[1] <= yc) != (b[1] <= yc) {
                    xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in xs.chunks_exact(2) {
                // Pixel x is filled when pair[0] <= x + 0.5 < pair[1].
                let x0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let x1 = ((pair[1] - 0.5).ceil().min(width as f64)).max(0.0) as usize;
                for x in x0..x1 {
                    ids[y * width + x] = index as u32 + 1;
                }
            }
        }
    }
    Ok(ids)
}

/// Interior (1) where a pixel centre lies inside any polygon, background (0)
/// elsewhere; no boundary class yet.
pub fn rasterize_fields(polygons: &[Polygon], width: usize, height: usize) -> Result<LabelMask> {
    let ids = rasterize_instances(polygons, width, height)?;
    let data = ids.into_iter().map(|id| if id > 0 { INTERIOR } else { BACKGROUND }).collect();
    LabelMask::new(width, height, data)
}

/// Inward/outward halves of a boundary band of the given total thickness.
pub fn band_split(thickness_px: usize) -> (usize, usize) {
    (thickness_px.div_ceil(2), thickness_px / 2)
}

/// Turns a {0,1} mask into a 3-class mask. A field pixel becomes boundary
/// when a background pixel lies within the inward half-thickness
/// (Chebyshev distance), a background pixel when a field pixel lies within the
/// outward half.
pub fn buffer_boundaries(mask: &LabelMask, thickness_px: i64) -> Result<LabelMask> {
    if mask.data.iter().any(|&v| v > INTERIOR) {
        return Err(Error::Input("boundary buffering expects a {0,1} mask".into()));
    }
    let ids: Vec<u32> = mask.data.iter().map(|&v| v as u32).collect();
    buffer_instances(&ids, mask.width, mask.height, thickness_px)
}

/// Boundary buffering on an instance raster: transitions between two
/// different fields count as edges too, so adjacent fields stay separated.
pub fn buffer_instances(ids: &[u32], width: usize, height: usize, thickness_px: i64) -> Result<LabelMask> {
    if thickness_px <= 0 {
        return config_err(format!("boundary thickness must be positive, got {}", thickness_px));
    }
    if ids.len() != width * height {
        return dim_err("instance raster does not match its dimensions");
    }
    let (inner, outer) = band_split(thickness_px as usize);
    let r = inner.max(outer) as i64;
    let mut out = vec![BACKGROUND; width * height];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let id = ids[(y as usize) * width + x as usize];
            // Smallest Chebyshev distance to a pixel with a different id.
            let mut best = i64::MAX;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= height as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= width as i64 {
                        continue;
                    }
                    let other = ids[(yy as usize) * width + xx as usize];
                    let differs = if id == 0 { other != 0 } else { other != id };
                    if differs {
                        best = best.min(dy.abs().max(dx.abs()));
                    }
                }
            }
            let o = &mut out[(y as usize) * width + x as usize];
            *o = if id == 0 {
                if best <= outer as i64 { BOUNDARY } else { BACKGROUND }
            } else if best <= inner as i64 {
                BOUNDARY
            } else {
                INTERIOR
            };
        }
    }
    LabelMask::new(width, height, out)
}

/// Centres `mask` in a `target × target` raster filled with the ignore code;
/// with odd slack the extra pixel goes bottom/right.
pub fn pad_with_ignore(mask: &LabelMask, target: usize) -> Result<LabelMask> {
    if target < mask.width || target < mask.height {
        return dim_err(format!(
            "cannot pad {}x{} mask into {}x{}",
            mask.height, mask.width, target, target
        ));
    }
    let top = (target - mask.height) / 2;
    let left = (target - mask.width) / 2;
    let mut out = LabelMask::filled(target, target, IGNORE);
    for y in 0..mask.height {
        let src = &mask.data[y * mask.width..(y + 1) * mask.width];
        let dst = (y + top) * target + left;
        out.data[dst..dst + mask.width].copy_from_slice(src);
    }
    Ok(out)
}

pub const MASK_PALETTE: [(u8, [u8; 3]); 4] = [
    (BACKGROUND, [255, 255, 255]),
    (INTERIOR, [0, 128, 0]),
    (BOUNDARY, [0, 0, 0]),
    (IGNORE, [128, 128, 128]),
];

/// RGB rendering: background white, interior green, boundary black, ignore gray.
pub fn mask_to_rgb(mask: &LabelMask) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(mask.data.len() * 3);
    for &v in &mask.data {
        let c = MASK_PALETTE
            .iter()
            .find(|(code, _)| *code == v)
            .map(|(_, c)| *c)
            .unwrap_or([128, 128, 128]);
        rgb.extend_from_slice(&c);
    }
    rgb
}
