//! Binary PGM/PPM writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image scaled so the maximum value maps to 255 and the minimum to 0.
/// A constant image is written black.
pub fn heatmap_pixels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::invalid(
            "pgm",
            format!("{} pixels for a {width}x{height} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<Vec<u8>> {
    if rgb.len() != width * height {
        return Err(Error::invalid(
            "ppm",
            format!("{} pixels for a {width}x{height} image", rgb.len()),
        ));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    Ok(out)
}

/// Fixed palette; label 0 is black.
pub fn label_color(label: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
    ];
    PALETTE[label % PALETTE.len()]
}

pub fn write_heatmap(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = encode_pgm(width, height, &heatmap_pixels(values))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    let rgb: Vec<[u8; 3]> = labels.iter().map(|&l| label_color(l)).collect();
    let bytes = encode_ppm(width, height, &rgb)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pixel payload of a binary PGM/PPM (after the three header tokens).
pub fn read_pnm_pixels(bytes: &[u8]) -> Option<(String, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    let w = fields[1].parse().ok()?;
    let h = fields[2].parse().ok()?;
    Some((fields[0].clone(), w, h, bytes.get(pos + 1..)?))
}
