//! Frequency-domain feature extraction.
//!
//! Three image transforms feed the frequency branch: a 2-D DCT, the amplitude
//! spectrum of the unnormalized 2-D DFT, and a single-level orthonormal Haar
//! wavelet decomposition. Coefficients are brought to a common scale with
//! `ln(1 + |c|)`, and each branch is standardized with statistics fitted on
//! the training split only.
//!
//! The DCT convention used throughout (and by its brute-force test oracle):
//!
//! ```text
//! DCT(i,j) = 1/√(2N) · C(i) · C(j) · Σ_a Σ_b pixel(a,b)
//!            · cos((2a+1)·i·π / 2N) · cos((2b+1)·j·π / 2N)
//! C(0) = 1/√2, C(x) = 1 for x > 0
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which frequency transform produced a spectral map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Dct,
    FftAmplitude,
    DwtHaar,
}

impl Transform {
    pub const ALL: [Transform; 3] = [Transform::Dct, Transform::FftAmplitude, Transform::DwtHaar];

    /// Short tag used on the command line and in file names.
    pub fn tag(self) -> &'static str {
        match self {
            Transform::Dct => "dct",
            Transform::FftAmplitude => "fft",
            Transform::DwtHaar => "dwt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Transform> {
        match tag {
            "dct" => Some(Transform::Dct),
            "fft" => Some(Transform::FftAmplitude),
            "dwt" => Some(Transform::DwtHaar),
            _ => None,
        }
    }

    /// Applies the transform to one square single-channel image.
    pub fn apply(self, channel: &Tensor) -> Result<Tensor> {
        match self {
            Transform::Dct => dct2d(channel),
            Transform::FftAmplitude => fft_amplitude2d(channel),
            Transform::DwtHaar => dwt_haar2d(channel),
        }
    }
}

/// A log-scaled frequency map together with its provenance.
#[derive(Clone, Debug)]
pub struct SpectralFeature {
    /// `[C, N, N]` map of log-scaled coefficients.
    pub map: Tensor,
    pub transform: Transform,
    pub log_scaled: bool,
    pub source_size: usize,
}

/// Which branch a set of normalization statistics belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spatial,
    Frequency,
}

/// Per-channel standardization statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub branch: Branch,
}

fn square_side(op: &'static str, channel: &Tensor) -> Result<usize> {
    if channel.shape.len() != 2 || channel.shape[0] != channel.shape[1] {
        return Err(Error::shape(op, format!("expected a square [N,N] input, got {:?}", channel.shape)));
    }
    Ok(channel.shape[0])
}

// ── DCT ─────────────────────────────────────────────────────────────────

/// 2-D DCT computed separably: 1-D cosine sums across rows, then across
/// columns, then the `1/√(2N)·C(i)·C(j)` scaling.
pub fn dct2d(channel: &Tensor) -> Result<Tensor> {
    let n = square_side("dct2d", channel)?;
    let nf = n as f64;
    // cos_m[i][a] = cos((2a+1)·i·π / 2N)
    let mut cos_m = vec![0.0; n * n];
    for i in 0..n {
        for a in 0..n {
            cos_m[i * n + a] = ((2 * a + 1) as f64 * i as f64 * PI / (2.0 * nf)).cos();
        }
    }
    // Across rows: tmp[a][j] = Σ_b x[a][b]·cos_m[j][b]
    let x = &channel.data;
    let mut tmp = vec![0.0; n * n];
    for a in 0..n {
        let row = &x[a * n..][..n];
        for j in 0..n {
            let c = &cos_m[j * n..][..n];
            let mut acc = 0.0;
            for b in 0..n {
                acc += row[b] * c[b];
            }
            tmp[a * n + j] = acc;
        }
    }
    // Across columns with the global scaling.
    let scale = 1.0 / (2.0 * nf).sqrt();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let c = &cos_m[i * n..][..n];
        let ci = if i == 0 { inv_sqrt2 } else { 1.0 };
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                acc += tmp[a * n + j] * c[a];
            }
            let cj = if j == 0 { inv_sqrt2 } else { 1.0 };
            out[i * n + j] = scale * ci * cj * acc;
        }
    }
    Tensor::new(vec![n, n], out)
}

// ── DFT / FFT amplitude ────────────────────────────────────────────────

/// Unnormalized separable 2-D DFT. Returns `(re, im)` planes of length `N²`.
pub(crate) fn dft2d(x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut cos_t = vec![0.0; n * n];
    let mut sin_t = vec![0.0; n * n];
    for k in 0..n {
        for a in 0..n {
            let ang = -2.0 * PI * (k * a % n) as f64 / nf;
            cos_t[k * n + a] = ang.cos();
            sin_t[k * n + a] = ang.sin();
        }
    }
    // Rows: r[a][v] = Σ_b x[a][b]·e^{-2πi·vb/N}
    let mut row_re = vec![0.0; n * n];
    let mut row_im = vec![0.0; n * n];
    for a in 0..n {
        let row = &x[a * n..][..n];
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for b in 0..n {
                let c = cos_t[v * n + b];
                let s = sin_t[v * n + b];
                re += row[b] * c;
                im += row[b] * s;
            }
            row_re[a * n + v] = re;
            row_im[a * n + v] = im;
        }
    }
    // Columns: X[u][v] = Σ_a r[a][v]·e^{-2πi·ua/N}
    let mut out_re = vec![0.0; n * n];
    let mut out_im = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for a in 0..n {
                let c = cos_t[u * n + a];
                let s = sin_t[u * n + a];
                let (rr, ri) = (row_re[a * n + v], row_im[a * n + v]);
                re += rr * c - ri * s;
                im += rr * s + ri * c;
            }
            out_re[u * n + v] = re;
            out_im[u * n + v] = im;
        }
    }
    (out_re, out_im)
}

/// Inverse of [`dft2d`] (with the 1/N² normalization), returning the real part.
pub(crate) fn idft2d_real(re: &[f64], im: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut cos_t = vec![0.0; n * n];
    let mut sin_t = vec![0.0; n * n];
    for k in 0..n {
        for a in 0..n {
            let ang = 2.0 * PI * (k * a % n) as f64 / nf;
            cos_t[k * n + a] = ang.cos();
            sin_t[k * n + a] = ang.sin();
        }
    }
    let mut row_re = vec![0.0; n * n];
    let mut row_im = vec![0.0; n * n];
    for u in 0..n {
        for b in 0..n {
            let (mut rre, mut rim) = (0.0, 0.0);
            for v in 0..n {
                let c = cos_t[b * n + v];
                let s = sin_t[b * n + v];
                let (xr, xi) = (re[u * n + v], im[u * n + v]);
                rre += xr * c - xi * s;
                rim += xr * s + xi * c;
            }
            row_re[u * n + b] = rre;
            row_im[u * n + b] = rim;
        }
    }
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for u in 0..n {
                let c = cos_t[a * n + u];
                let s = sin_t[a * n + u];
                acc += row_re[u * n + b] * c - row_im[u * n + b] * s;
            }
            out[a * n + b] = acc / (nf * nf);
        }
    }
    out
}

/// Elementwise magnitude of the unnormalized 2-D DFT. The DC term stays at
/// index `(0,0)`; no center shift is applied.
pub fn fft_amplitude2d(channel: &Tensor) -> Result<Tensor> {
    let n = square_side("fft_amplitude2d", channel)?;
    let (re, im) = dft2d(&channel.data, n);
    let amp: Vec<f64> = re.iter().zip(&im).map(|(r, i)| (r * r + i * i).sqrt()).collect();
    Tensor::new(vec![n, n], amp)
}

/// Moves the DC term to the center of the map (for display only).
pub fn center_shift(map: &Tensor) -> Result<Tensor> {
    let n = square_side("center_shift", map)?;
    let half = n / 2;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[((i + half) % n) * n + (j + half) % n] = map.data[i * n + j];
        }
    }
    Tensor::new(vec![n, n], out)
}

// ── Haar DWT ────────────────────────────────────────────────────────────

/// Single-level orthonormal 2-D Haar transform. The output tiles the four
/// subbands as `[LL LH; HL HH]`, each of size `(N/2)×(N/2)`.
pub fn dwt_haar2d(channel: &Tensor) -> Result<Tensor> {
    let n = square_side("dwt_haar2d", channel)?;
    if n % 2 != 0 {
        return Err(Error::invalid("dwt_haar2d", format!("side {n} must be even")));
    }
    let h = n / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // Rows: left half = lowpass, right half = highpass.
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..h {
            let a = channel.data[i * n + 2 * p];
            let b = channel.data[i * n + 2 * p + 1];
            rows[i * n + p] = (a + b) * s;
            rows[i * n + h + p] = (a - b) * s;
        }
    }
    // Columns: top half = lowpass, bottom half = highpass.
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for p in 0..h {
            let a = rows[(2 * p) * n + j];
            let b = rows[(2 * p + 1) * n + j];
            out[p * n + j] = (a + b) * s;
            out[(h + p) * n + j] = (a - b) * s;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Inverse of [`dwt_haar2d`].
pub fn dwt_haar2d_inverse(coeffs: &Tensor) -> Result<Tensor> {
    let n = square_side("dwt_haar2d_inverse", coeffs)?;
    if n % 2 != 0 {
        return Err(Error::invalid("dwt_haar2d_inverse", format!("side {n} must be even")));
    }
    let h = n / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut rows = vec![0.0; n * n];
    for j in 0..n {
        for p in 0..h {
            let l = coeffs.data[p * n + j];
            let hi = coeffs.data[(h + p) * n + j];
            rows[(2 * p) * n + j] = (l + hi) * s;
            rows[(2 * p + 1) * n + j] = (l - hi) * s;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..h {
            let l = rows[i * n + p];
            let hi = rows[i * n + h + p];
            out[i * n + 2 * p] = (l + hi) * s;
            out[i * n + 2 * p + 1] = (l - hi) * s;
        }
    }
    Tensor::new(vec![n, n], out)
}

// ── Log scaling and normalization ──────────────────────────────────────

/// Elementwise `ln(1 + |c|)`: zero-safe, finite for all finite inputs, and
/// monotone in `|c|`.
pub fn log_scale(coeffs: &Tensor) -> Tensor {
    let data: Vec<f64> = coeffs.data.iter().map(|&c| c.abs().ln_1p()).collect();
    Tensor { shape: coeffs.shape.clone(), data, grad: None, requires_grad: false }
}

/// Per-channel mean and standard deviation over a corpus view of `[C,N,N]`
/// tensors. The standard deviation is floored at `1e-8`.
pub fn fit_branch_stats(views: &[Tensor], branch: Branch) -> Result<BranchStats> {
    if views.is_empty() {
        return Err(Error::EmptyInput { op: "fit_branch_stats" });
    }
    let c = views[0].shape[0];
    let plane: usize = views[0].shape[1..].iter().product();
    for v in views {
        if v.shape != views[0].shape {
            return Err(Error::shape(
                "fit_branch_stats",
                format!("inconsistent view shapes: {:?} vs {:?}", v.shape, views[0].shape),
            ));
        }
    }
    let count = (views.len() * plane) as f64;
    let mut mean = vec![0.0; c];
    for v in views {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += v.data[ch * plane..][..plane].iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for v in views {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += v.data[ch * plane..][..plane]
                .iter()
                .map(|&x| (x - m) * (x - m))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|&s| (s / count).sqrt().max(1e-8)).collect();
    Ok(BranchStats { mean, std, branch })
}

/// Standardizes a `[C,N,N]` tensor with per-channel statistics. Not
/// idempotent: re-applying shifts by `−mean/std` again and rescales.
pub fn apply_normalization(x: &Tensor, stats: &BranchStats) -> Tensor {
    let c = stats.mean.len();
    let plane: usize = x.shape[1..].iter().product();
    debug_assert_eq!(x.shape[0], c);
    let mut data = Vec::with_capacity(x.data.len());
    for ch in 0..c {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        data.extend(x.data[ch * plane..][..plane].iter().map(|&v| (v - m) / s));
    }
    Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false }
}

// ── Spectrum aggregation ───────────────────────────────────────────────

/// Per-channel log-scaled spectrum of an `[C,N,N]` image.
pub fn compute_spectral_feature(image: &Tensor, transform: Transform) -> Result<SpectralFeature> {
    if image.shape.len() != 3 {
        return Err(Error::shape(
            "compute_spectral_feature",
            format!("expected [C,N,N], got {:?}", image.shape),
        ));
    }
    let (c, n) = (image.shape[0], image.shape[1]);
    let mut data = Vec::with_capacity(image.data.len());
    for ch in 0..c {
        let plane = Tensor::new(vec![n, n], image.data[ch * n * n..][..n * n].to_vec())?;
        let spec = log_scale(&transform.apply(&plane)?);
        data.extend_from_slice(&spec.data);
    }
    Ok(SpectralFeature {
        map: Tensor::new(vec![c, n, n], data)?,
        transform,
        log_scaled: true,
        source_size: n,
    })
}

/// Elementwise mean of `log_scale(transform(frame))` over a set of frames.
///
/// Frames are accumulated in a canonical order (sorted by their transformed
/// bit patterns), so any permutation of the input produces bit-identical
/// output.
pub fn average_spectrum(frames: &[Tensor], transform: Transform) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::EmptyInput { op: "average_spectrum" });
    }
    let shape = frames[0].shape.clone();
    for f in frames {
        if f.shape != shape {
            return Err(Error::shape(
                "average_spectrum",
                format!("inconsistent frame shapes: {:?} vs {:?}", f.shape, shape),
            ));
        }
    }
    let mut spectra = Vec::with_capacity(frames.len());
    for f in frames {
        spectra.push(log_scale(&transform.apply(f)?));
    }
    let mut order: Vec<usize> = (0..spectra.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&spectra[a].data, &spectra[b].data);
        for (x, y) in sa.iter().zip(sb) {
            match x.to_bits().cmp(&y.to_bits()) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let numel = spectra[0].data.len();
    let mut acc = vec![0.0; numel];
    for &idx in &order {
        for (a, v) in acc.iter_mut().zip(&spectra[idx].data) {
            *a += v;
        }
    }
    let m = frames.len() as f64;
    for a in acc.iter_mut() {
        *a /= m;
    }
    Tensor::new(shape, acc)
}

/// Mean map value in each of `n_bands` radial-frequency bands. The radius of
/// coefficient `(i,j)` is `√(i²+j²)` normalized by the map's corner radius;
/// band `k` covers `[k/n_bands, (k+1)/n_bands)` with the last band closed.
/// Empty bands yield 0.
pub fn radial_band_means(map: &Tensor, n_bands: usize) -> Result<Vec<f64>> {
    let n = square_side("radial_band_means", map)?;
    let max_r = if n > 1 { (2.0 * ((n - 1) as f64).powi(2)).sqrt() } else { 1.0 };
    let mut sums = vec![0.0; n_bands];
    let mut counts = vec![0usize; n_bands];
    for i in 0..n {
        for j in 0..n {
            let r = ((i * i + j * j) as f64).sqrt() / max_r;
            let band = ((r * n_bands as f64) as usize).min(n_bands - 1);
            sums[band] += map.data[i * n + j];
            counts[band] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}
