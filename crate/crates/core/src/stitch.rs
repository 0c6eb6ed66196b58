//! Cross-stitch units: a learnable 2×2 linear mix of two same-shaped
//! activation maps, with analytic forward and backward rules.
//!
//! At every location the mixed outputs are
//!
//! ```text
//! x'_r = a_rr·x_r + a_rd·x_d
//! x'_d = a_dr·x_r + a_dd·x_d
//! ```
//!
//! and the backward rules follow: input gradients use the transposed mixing
//! matrix, and each alpha gradient is the sum over all locations of the
//! upstream gradient of its own output row times the input it multiplies.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four mixing scalars of one cross-stitch unit plus their gradient
/// accumulators. The same scalars apply at every batch, channel, and spatial
/// position of the stitched maps.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossStitchUnit {
    pub alpha_rr: f64,
    pub alpha_rd: f64,
    pub alpha_dr: f64,
    pub alpha_dd: f64,
    pub grads: [f64; 4],
}

impl CrossStitchUnit {
    /// Fresh unit at the training initialization: same-branch weights 0.9,
    /// cross-branch weights 0.1, so each row is a convex combination.
    pub fn new() -> Self {
        CrossStitchUnit {
            alpha_rr: 0.9,
            alpha_rd: 0.1,
            alpha_dr: 0.1,
            alpha_dd: 0.9,
            grads: [0.0; 4],
        }
    }

    /// Unit that passes both branches through unchanged.
    pub fn identity() -> Self {
        CrossStitchUnit {
            alpha_rr: 1.0,
            alpha_rd: 0.0,
            alpha_dr: 0.0,
            alpha_dd: 1.0,
            grads: [0.0; 4],
        }
    }

    pub fn from_alphas(alphas: [f64; 4]) -> Self {
        CrossStitchUnit {
            alpha_rr: alphas[0],
            alpha_rd: alphas[1],
            alpha_dr: alphas[2],
            alpha_dd: alphas[3],
            grads: [0.0; 4],
        }
    }

    /// Alphas in the fixed order `(rr, rd, dr, dd)`.
    pub fn alphas(&self) -> [f64; 4] {
        [self.alpha_rr, self.alpha_rd, self.alpha_dr, self.alpha_dd]
    }

    pub fn set_alphas(&mut self, alphas: [f64; 4]) {
        self.alpha_rr = alphas[0];
        self.alpha_rd = alphas[1];
        self.alpha_dr = alphas[2];
        self.alpha_dd = alphas[3];
    }

    pub fn zero_grads(&mut self) {
        self.grads = [0.0; 4];
    }
}

impl Default for CrossStitchUnit {
    fn default() -> Self {
        CrossStitchUnit::new()
    }
}

/// Unit at the documented initialization (0.9 same-branch, 0.1 cross-branch).
pub fn init_unit() -> CrossStitchUnit {
    CrossStitchUnit::new()
}

/// Gradients produced by [`stitch_backward`].
#[derive(Clone, Debug)]
pub struct StitchGrads {
    pub dx_r: Tensor,
    pub dx_d: Tensor,
    /// `(d_rr, d_rd, d_dr, d_dd)`, each summed over every location.
    pub dalpha: [f64; 4],
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Applies the 2×2 mix at every location, returning `(x'_r, x'_d)`.
pub fn stitch_forward(
    x_r: &Tensor,
    x_d: &Tensor,
    unit: &CrossStitchUnit,
) -> Result<(Tensor, Tensor)> {
    check_same_shape("stitch_forward", x_r, x_d)?;
    let (a_rr, a_rd, a_dr, a_dd) = (unit.alpha_rr, unit.alpha_rd, unit.alpha_dr, unit.alpha_dd);
    let out_r: Vec<f64> = x_r
        .data
        .iter()
        .zip(&x_d.data)
        .map(|(&r, &d)| a_rr * r + a_rd * d)
        .collect();
    let out_d: Vec<f64> = x_r
        .data
        .iter()
        .zip(&x_d.data)
        .map(|(&r, &d)| a_dr * r + a_dd * d)
        .collect();
    Ok((
        Tensor { shape: x_r.shape.clone(), data: out_r, grad: None, requires_grad: false },
        Tensor { shape: x_r.shape.clone(), data: out_d, grad: None, requires_grad: false },
    ))
}

/// Analytic backward rule for [`stitch_forward`].
///
/// Input gradients apply the transposed mixing matrix:
/// `dL/dx_r = a_rr·dL/dx'_r + a_dr·dL/dx'_d` and symmetrically for `x_d`.
/// Each alpha gradient sums the per-location product of the upstream gradient
/// of the output row the alpha feeds and the input it multiplies, in flat
/// row-major order.
pub fn stitch_backward(
    d_out_r: &Tensor,
    d_out_d: &Tensor,
    x_r: &Tensor,
    x_d: &Tensor,
    unit: &CrossStitchUnit,
) -> Result<StitchGrads> {
    check_same_shape("stitch_backward", d_out_r, d_out_d)?;
    check_same_shape("stitch_backward", x_r, x_d)?;
    check_same_shape("stitch_backward", d_out_r, x_r)?;
    let (a_rr, a_rd, a_dr, a_dd) = (unit.alpha_rr, unit.alpha_rd, unit.alpha_dr, unit.alpha_dd);

    let dx_r: Vec<f64> = d_out_r
        .data
        .iter()
        .zip(&d_out_d.data)
        .map(|(&gr, &gd)| a_rr * gr + a_dr * gd)
        .collect();
    let dx_d: Vec<f64> = d_out_r
        .data
        .iter()
        .zip(&d_out_d.data)
        .map(|(&gr, &gd)| a_rd * gr + a_dd * gd)
        .collect();

    let (mut d_rr, mut d_rd, mut d_dr, mut d_dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x_r.data.len() {
        let (gr, gd) = (d_out_r.data[i], d_out_d.data[i]);
        let (xr, xd) = (x_r.data[i], x_d.data[i]);
        d_rr += gr * xr;
        d_rd += gr * xd;
        d_dr += gd * xr;
        d_dd += gd * xd;
    }

    Ok(StitchGrads {
        dx_r: Tensor { shape: x_r.shape.clone(), data: dx_r, grad: None, requires_grad: false },
        dx_d: Tensor { shape: x_d.shape.clone(), data: dx_d, grad: None, requires_grad: false },
        dalpha: [d_rr, d_rd, d_dr, d_dd],
    })
}
