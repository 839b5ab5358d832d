//! 16-bit binary PGM export with a min-max window.

use anyhow::{ensure, Result};
use xct_core::geometry::Volume;

pub fn slice_to_pgm(volume: &Volume, k: usize) -> Result<Vec<u8>> {
    let [slices, rows, cols] = volume.shape();
    ensure!(k < slices, "slice {k} out of range for {slices} slices");
    let data = volume.slice(k);
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(2 * data.len());
    for &v in data {
        let level = if span > 0.0 {
            ((v - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}
