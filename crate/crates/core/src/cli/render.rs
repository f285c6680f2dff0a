//! Token-grid rendering with a fixed 16-colour palette.

use std::fs;
use std::path::Path;

use crate::error::{ArpgError, Result};
use crate::training::TokenGrid;

/// RGB of token ids `0..16`; larger ids wrap.
pub const PALETTE: [[u8; 3]; 16] = [
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
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Binary PPM (P6) bytes, each token drawn as a `scale×scale` square.
pub fn ppm_bytes(grid: &TokenGrid, scale: usize) -> Vec<u8> {
    let s = scale.max(1);
    let (w, h) = (grid.width * s, grid.height * s);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&PALETTE[grid.get(y / s, x / s) % PALETTE.len()]);
        }
    }
    out
}

pub fn write_ppm(path: &Path, grid: &TokenGrid, scale: usize) -> Result<()> {
    fs::write(path, ppm_bytes(grid, scale)).map_err(|e| ArpgError::io(path, e))
}
