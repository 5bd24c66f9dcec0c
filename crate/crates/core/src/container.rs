//! On-disk containers. Each file is a 4-byte magic, a little-endian `u32`
//! header length, a UTF-8 JSON header, then a raw little-endian payload.
//! `FSCH` holds f32 band-sequential rasters, `FSMK` u8 masks and `FSNW`
//! network checkpoints. Every write goes to a temporary sibling and is
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ArchSpec, LayerShape, NetworkParams};
use crate::raster::{Chip, ChipProvenance, LabelMask};
use crate::tensor::Tensor;

pub const MAGIC_CHIP: &[u8; 4] = b"FSCH";
pub const MAGIC_MASK: &[u8; 4] = b"FSMK";
pub const MAGIC_NET: &[u8; 4] = b"FSNW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    /// `[bands, height, width]`.
    pub dims: [usize; 3],
    pub dtype: String,
    pub bands: usize,
    #[serde(default)]
    pub tile_id: String,
    #[serde(default)]
    pub year: String,
    #[serde(default)]
    pub offset: (i64, i64),
    #[serde(default)]
    pub provenance: ChipProvenance,
    /// Free-form layer description, e.g. `"mean_probs"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub arch: ArchSpec,
    pub layers: Vec<LayerShape>,
    pub param_count: usize,
    /// Anything the trainer wants to carry along (normalization stats, epoch).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp: PathBuf = dir.join(format!(".{}.tmp-{}", name, std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn encode(magic: &[u8; 4], header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + h.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode<'a, H: for<'de> Deserialize<'de>>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format("truncated header".into()));
    }
    let header = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| Error::Format(format!("bad header: {}", e)))?;
    Ok((header, &bytes[8 + n..]))
}

fn f32_payload(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(payload: &[u8], n: usize) -> Result<Vec<f32>> {
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn encode_chip(chip: &Chip) -> Result<Vec<u8>> {
    let header = RasterHeader {
        dims: [chip.bands, chip.height, chip.width],
        dtype: "f32".into(),
        bands: chip.bands,
        tile_id: chip.tile_id.clone(),
        year: chip.year.clone(),
        offset: chip.offset,
        provenance: chip.provenance.clone(),
        layer: None,
    };
    encode(MAGIC_CHIP, &header, &f32_payload(chip.data.iter().copied()))
}

pub fn decode_chip(bytes: &[u8]) -> Result<(Chip, RasterHeader)> {
    let (h, payload): (RasterHeader, _) = decode(MAGIC_CHIP, bytes)?;
    if h.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", h.dtype)));
    }
    let [b, y, x] = h.dims;
    let mut chip = Chip::new(b, y, x, read_f32s(payload, b * y * x)?)?;
    chip.tile_id = h.tile_id.clone();
    chip.year = h.year.clone();
    chip.offset = h.offset;
    chip.provenance = h.provenance.clone();
    Ok((chip, h))
}

pub fn write_chip(path: &Path, chip: &Chip) -> Result<()> {
    write_atomic(path, &encode_chip(chip)?)
}

pub fn read_chip(path: &Path) -> Result<Chip> {
    Ok(decode_chip(&fs::read(path)?)?.0)
}

/// Stores a float layer (probabilities, entropy, ...) as an f32 chip container.
pub fn write_layer(path: &Path, t: &Tensor<f64>, layer: &str, tile_id: &str, year: &str) -> Result<()> {
    let header = RasterHeader {
        dims: [t.c, t.h, t.w],
        dtype: "f32".into(),
        bands: t.c,
        tile_id: tile_id.into(),
        year: year.into(),
        offset: (0, 0),
        provenance: ChipProvenance::default(),
        layer: Some(layer.into()),
    };
    write_atomic(path, &encode(MAGIC_CHIP, &header, &f32_payload(t.data.iter().map(|&v| v as f32)))?)
}

pub fn encode_mask(mask: &LabelMask, tile_id: &str, year: &str) -> Result<Vec<u8>> {
    let header = RasterHeader {
        dims: [1, mask.height, mask.width],
        dtype: "u8".into(),
        bands: 1,
        tile_id: tile_id.into(),
        year: year.into(),
        offset: (0, 0),
        provenance: ChipProvenance::default(),
        layer: None,
    };
    encode(MAGIC_MASK, &header, &mask.data)
}

pub fn decode_mask(bytes: &[u8]) -> Result<(LabelMask, RasterHeader)> {
    let (h, payload): (RasterHeader, _) = decode(MAGIC_MASK, bytes)?;
    let [_, y, x] = h.dims;
    if h.dtype != "u8" || payload.len() != y * x {
        return Err(Error::Format("mask payload does not match its header".into()));
    }
    Ok((LabelMask::new(x, y, payload.to_vec())?, h))
}

pub fn write_mask(path: &Path, mask: &LabelMask, tile_id: &str, year: &str) -> Result<()> {
    write_atomic(path, &encode_mask(mask, tile_id, year)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    Ok(decode_mask(&fs::read(path)?)?.0)
}

pub fn encode_checkpoint(params: &NetworkParams<f32>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dtype: "f32".into(),
        arch: params.arch.clone(),
        layers: params.layers.clone(),
        param_count: params.data.len(),
        extra,
    };
    encode(MAGIC_NET, &header, &f32_payload(params.data.iter().copied()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkParams<f32>, CheckpointHeader)> {
    let (h, payload): (CheckpointHeader, _) = decode(MAGIC_NET, bytes)?;
    if h.layers != h.arch.layer_shapes() {
        return Err(Error::Checkpoint("layer table does not match the stored architecture".into()));
    }
    let data = read_f32s(payload, h.param_count)?;
    if data.len() != h.arch.param_count() {
        return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
    }
    Ok((
        NetworkParams {
            arch: h.arch.clone(),
            layers: h.layers.clone(),
            data,
        },
        h,
    ))
}

pub fn write_checkpoint(path: &Path, params: &NetworkParams<f32>, extra: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, extra)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(NetworkParams<f32>, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

fn png_bytes(w: usize, h: usize, data: &[u8], color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("png encoding failed: {}", e)))?;
    Ok(out)
}

pub fn write_png_rgb(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write_atomic(path, &png_bytes(w, h, rgb, image::ExtendedColorType::Rgb8)?)
}

pub fn write_png_gray(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    write_atomic(path, &png_bytes(w, h, gray, image::ExtendedColorType::L8)?)
}

/// Decodes an 8-bit RGB PNG.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Format(format!("png decoding failed: {}", e)))?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}
