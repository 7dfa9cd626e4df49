//! On-disk scene formats: binary PPM/PGM (decoded with `image`) and the raw
//! `CTR1` centre-offset file.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use pixclust_core::grid::Grid;
use pixclust_core::scene::{CenterOffsetMap, Image, InstanceLabelMap, SemanticLabelMap};

use crate::error::{CliError, Result};

pub const CENTER_MAGIC: &[u8; 4] = b"CTR1";
const CENTER_HEADER: usize = 16;

fn netpbm(magic: &str, w: usize, h: usize, maxval: u16, body: impl IntoIterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    out.extend(body);
    out
}

fn decode(bytes: &[u8], what: &'static str) -> Result<DynamicImage> {
    image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| CliError::format(what, e.to_string()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM (P6); channel values are clamped to [0, 1].
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let body = image.as_slice().iter().flat_map(|px| px.map(quantize));
    netpbm("P6", image.width(), image.height(), 255, body)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let img = decode(bytes, "PPM image")?;
    let DynamicImage::ImageRgb8(rgb) = img else {
        return Err(CliError::format("PPM image", "expected 8-bit RGB"));
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let px = rgb.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    Ok(Grid::from_vec(h, w, px).expect("pixel count matches dimensions"))
}

/// 16-bit binary PGM (P5, big-endian samples).
pub fn encode_pgm16(map: &InstanceLabelMap) -> Vec<u8> {
    netpbm("P5", map.width(), map.height(), u16::MAX, map.as_slice().iter().flat_map(|v| v.to_be_bytes()))
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<InstanceLabelMap> {
    let DynamicImage::ImageLuma16(g) = decode(bytes, "16-bit PGM")? else {
        return Err(CliError::format("16-bit PGM", "expected a 16-bit graymap"));
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Grid::from_vec(h, w, g.into_raw()).expect("pixel count matches dimensions"))
}

/// 8-bit binary PGM (P5).
pub fn encode_pgm8(map: &SemanticLabelMap) -> Vec<u8> {
    netpbm("P5", map.width(), map.height(), 255, map.as_slice().iter().copied())
}

pub fn decode_pgm8(bytes: &[u8]) -> Result<SemanticLabelMap> {
    let DynamicImage::ImageLuma8(g) = decode(bytes, "8-bit PGM")? else {
        return Err(CliError::format("8-bit PGM", "expected an 8-bit graymap"));
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Grid::from_vec(h, w, g.into_raw()).expect("pixel count matches dimensions"))
}

/// `CTR1`, height, width and channel count (2) as LE `u32`, then row-major
/// `[dx, dy]` pairs as LE `f32`.
pub fn encode_centers(map: &CenterOffsetMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(CENTER_HEADER + map.len() * 8);
    out.extend_from_slice(CENTER_MAGIC);
    for v in [map.height() as u32, map.width() as u32, 2] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &[dx, dy] in map.as_slice() {
        out.extend_from_slice(&(dx as f32).to_le_bytes());
        out.extend_from_slice(&(dy as f32).to_le_bytes());
    }
    out
}

pub fn decode_centers(bytes: &[u8]) -> Result<CenterOffsetMap> {
    const WHAT: &str = "centre file";
    if bytes.len() < CENTER_HEADER || &bytes[..4] != CENTER_MAGIC {
        return Err(CliError::format(WHAT, "missing CTR1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, ch) = (word(4), word(8), word(12));
    if ch != 2 {
        return Err(CliError::format(WHAT, format!("expected 2 channels, found {ch}")));
    }
    let body = &bytes[CENTER_HEADER..];
    if body.len() != h * w * 8 {
        return Err(CliError::format(WHAT, format!("{} payload bytes for a {h}x{w} map", body.len())));
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap()) as f64;
    let data = body.chunks_exact(8).map(|c| [f(&c[..4]), f(&c[4..])]).collect();
    Ok(Grid::from_vec(h, w, data).expect("pixel count matches dimensions"))
}
