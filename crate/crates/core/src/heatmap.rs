//! Heatmap rendering for averaged frequency spectra.
//!
//! The colormap is a fixed three-stop linear ramp, black → orange → white,
//! stretched over the `[min, max]` of the map. A constant map (max = min)
//! renders all black. Rendering is byte-deterministic.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ANCHORS: [[f64; 3]; 3] = [
    [0.0, 0.0, 0.0],       // black
    [255.0, 165.0, 0.0],   // orange
    [255.0, 255.0, 255.0], // white
];

/// Maps `t ∈ [0,1]` onto the black→orange→white ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (lo, hi, s) = if t < 0.5 {
        (ANCHORS[0], ANCHORS[1], t * 2.0)
    } else {
        (ANCHORS[1], ANCHORS[2], (t - 0.5) * 2.0)
    };
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (lo[c] + (hi[c] - lo[c]) * s).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Renders a square map to a binary PPM heatmap.
pub fn render_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    if map.shape.len() != 2 || map.shape[0] != map.shape[1] {
        return Err(Error::shape(
            "render_heatmap",
            format!("expected a square [N,N] map, got {:?}", map.shape),
        ));
    }
    let n = map.shape[0];
    let lo = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = Vec::with_capacity(n * n * 3 + 32);
    bytes.extend_from_slice(format!("P6\n{n} {n}\n255\n").as_bytes());
    for &v in &map.data {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        bytes.extend_from_slice(&colormap(t));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
