//! Deterministic synthetic forgery corpus.
//!
//! "Real" images are seeded Gaussian random fields with power spectrum
//! falling off as `1/f²` plus a random smooth gradient, so their spectral
//! energy decays with frequency the way natural images' does. "Fake"
//! counterparts are produced by area-downsampling ×2 and nearest-neighbor
//! upsampling ×2, blended 50/50 with the original inside a centered circle.
//! The resample cycle suppresses and aliases content near Nyquist, so fakes
//! carry a measurably depressed highest-band spectrum — the upsampling
//! artifact the frequency branch learns to exploit.
//!
//! Generation is a pure function of `(n_groups, size, fractions, seed)`:
//! per-sample seeds derive from the corpus seed and the group index, never
//! from execution order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::spectral::{dct2d, idft2d_real, log_scale, radial_band_means};
use crate::tensor::Tensor;
use crate::threads;

/// A labeled square RGB image with generation provenance.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, N, N]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    /// Pseudo-video identifier; a real/fake pair shares one.
    pub group_id: u64,
    pub seed: u64,
}

/// Train/validation/test splits, disjoint by group id, each balanced 1:1.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub image_size: usize,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `(real, fake)` counts per split.
    pub fn class_counts(&self, name: SplitName) -> (usize, usize) {
        let split = self.split(name);
        let fake = split.iter().filter(|s| s.label == Label::Fake).count();
        (split.len() - fake, fake)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn dir(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

// ── Seed derivation ─────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-index seed derivation.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

// ── Generators ──────────────────────────────────────────────────────────

/// Natural-image surrogate: per channel, a Gaussian random field whose
/// amplitude spectrum falls off as `1/f` (power `1/f²`), plus a random linear
/// gradient, min-max normalized to `[0, 1]`.
pub fn gen_real(seed: u64, n: usize) -> Sample {
    assert!(n >= 16, "gen_real: side {n} must be at least 16");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * n * n);
    for _ in 0..3 {
        data.extend(gen_field(&mut rng, n));
    }
    Sample {
        image: Tensor::new(vec![3, n, n], data).expect("field size"),
        label: Label::Real,
        group_id: 0,
        seed,
    }
}

fn gen_field(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    for u in 0..n {
        let fu = u.min(n - u) as f64;
        for v in 0..n {
            let fv = v.min(n - v) as f64;
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let f = (fu * fu + fv * fv).sqrt();
            let amp = if f == 0.0 { 0.0 } else { 1.0 / f };
            re[u * n + v] = a * amp;
            im[u * n + v] = b * amp;
        }
    }
    let field = idft2d_real(&re, &im, n);

    // Standardize the noise field, then add a random smooth gradient.
    let count = (n * n) as f64;
    let mean = field.iter().sum::<f64>() / count;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let std = var.sqrt().max(1e-12);
    let gx: f64 = StandardNormal.sample(rng);
    let gy: f64 = StandardNormal.sample(rng);

    let mut out = vec![0.0; n * n];
    let denom = (n - 1) as f64;
    for i in 0..n {
        let y = i as f64 / denom - 0.5;
        for j in 0..n {
            let x = j as f64 / denom - 0.5;
            out[i * n + j] = (field[i * n + j] - mean) / std + 1.2 * (gx * x + gy * y);
        }
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in out.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        out.iter_mut().for_each(|v| *v = 0.5);
    }
    out
}

/// Forged counterpart: area-downsample ×2, nearest-neighbor upsample ×2,
/// blended 50/50 with the original inside a centered circle of radius
/// `0.375·N`. Keeps the group id; values stay in `[0, 1]`.
pub fn gen_fake(real: &Sample) -> Sample {
    let n = real.image.shape[1];
    assert!(n.is_multiple_of(2), "gen_fake: side {n} must be even");
    let h = n / 2;
    let mut data = Vec::with_capacity(3 * n * n);
    let center = (n as f64 - 1.0) / 2.0;
    let radius2 = (0.375 * n as f64).powi(2);
    for c in 0..3 {
        let plane = &real.image.data[c * n * n..][..n * n];
        let mut down = vec![0.0; h * h];
        for i in 0..h {
            for j in 0..h {
                down[i * h + j] = 0.25
                    * (plane[(2 * i) * n + 2 * j]
                        + plane[(2 * i) * n + 2 * j + 1]
                        + plane[(2 * i + 1) * n + 2 * j]
                        + plane[(2 * i + 1) * n + 2 * j + 1]);
            }
        }
        for i in 0..n {
            let dy = i as f64 - center;
            for j in 0..n {
                let dx = j as f64 - center;
                let orig = plane[i * n + j];
                let v = if dy * dy + dx * dx <= radius2 {
                    let up = down[(i / 2) * h + j / 2];
                    0.5 * orig + 0.5 * up
                } else {
                    orig
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, n, n], data).expect("plane size"),
        label: Label::Fake,
        group_id: real.group_id,
        seed: real.seed,
    }
}

// ── Corpus construction ─────────────────────────────────────────────────

/// Largest-remainder split of `n` items into quotas proportional to
/// `fractions`. Remainder ties go to the earlier split.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &idx in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[idx] += 1;
        rest -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Builds a deterministic corpus of `n_groups` real/fake pairs at side `n`,
/// split by group into train/val/test. Refuses to emit a corpus whose fakes
/// do not carry a statistically detectable high-frequency spectral gap.
pub fn build_corpus(n_groups: usize, n: usize, fractions: [f64; 3], seed: u64) -> Result<Corpus> {
    if n_groups == 0 {
        return Err(Error::EmptyInput { op: "build_corpus" });
    }
    if n < 16 || !n.is_multiple_of(2) {
        return Err(Error::invalid("build_corpus", format!("side {n} must be even and ≥ 16")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::invalid(
            "build_corpus",
            format!("split fractions {fractions:?} must be non-negative and sum to 1"),
        ));
    }

    let pairs: Vec<(Sample, Sample)> = threads::pool().install(|| {
        (0..n_groups as u64)
            .into_par_iter()
            .map(|g| {
                let mut retry = 0u64;
                loop {
                    let s = derive_seed(derive_seed(seed, g), retry);
                    let mut real = gen_real(s, n);
                    real.group_id = g;
                    let fake = gen_fake(&real);
                    // Degenerate artifact-free pairs (identical at 8-bit
                    // precision) are regenerated with a fresh seed.
                    if quantize(&real.image) != quantize(&fake.image) || retry >= 32 {
                        return (real, fake);
                    }
                    retry += 1;
                }
            })
            .collect()
    });

    let [n_train, n_val, _] = split_counts(n_groups, fractions);
    let mut corpus = Corpus { train: Vec::new(), val: Vec::new(), test: Vec::new(), image_size: n };
    for (g, (real, fake)) in pairs.into_iter().enumerate() {
        let split = if g < n_train {
            &mut corpus.train
        } else if g < n_train + n_val {
            &mut corpus.val
        } else {
            &mut corpus.test
        };
        split.push(real);
        split.push(fake);
    }

    // The high-frequency gap is the signal the frequency branch exploits;
    // assert its presence before handing the corpus out.
    if n_groups >= 2 {
        let all: Vec<&Sample> =
            corpus.train.iter().chain(&corpus.val).chain(&corpus.test).collect();
        let reals: Vec<Tensor> = all
            .iter()
            .filter(|s| s.label == Label::Real)
            .take(200)
            .map(|s| s.image.clone())
            .collect();
        let fakes: Vec<Tensor> = all
            .iter()
            .filter(|s| s.label == Label::Fake)
            .take(200)
            .map(|s| s.image.clone())
            .collect();
        let gap = high_band_gap(&reals, &fakes)?;
        let detectable = gap.p_value < 0.01;
        if !detectable {
            return Err(Error::invalid(
                "build_corpus",
                format!(
                    "high-frequency spectral gap not detectable: p = {:.3e} (real {:.4}, fake {:.4})",
                    gap.p_value, gap.mean_real, gap.mean_fake
                ),
            ));
        }
    }
    Ok(corpus)
}

// ── Spectral gap measurement ────────────────────────────────────────────

/// Outcome of the two-sample comparison of highest-band log-DCT energies.
#[derive(Clone, Copy, Debug)]
pub struct SpectralGap {
    pub mean_real: f64,
    pub mean_fake: f64,
    /// Two-sided Welch p-value for equal means.
    pub p_value: f64,
}

/// Highest radial-band mean of the log-scaled DCT spectrum, averaged over
/// channels — one scalar per image.
pub fn high_band_energy(image: &Tensor) -> Result<f64> {
    let (c, n) = (image.shape[0], image.shape[1]);
    let mut acc = 0.0;
    for ch in 0..c {
        let plane = Tensor::new(vec![n, n], image.data[ch * n * n..][..n * n].to_vec())?;
        let spec = log_scale(&dct2d(&plane)?);
        let bands = radial_band_means(&spec, 4)?;
        acc += bands[3];
    }
    Ok(acc / c as f64)
}

/// Welch two-sample test on per-image highest-band log-DCT energies.
pub fn high_band_gap(real_images: &[Tensor], fake_images: &[Tensor]) -> Result<SpectralGap> {
    if real_images.len() < 2 || fake_images.len() < 2 {
        return Err(Error::EmptyInput { op: "high_band_gap" });
    }
    let energies = |imgs: &[Tensor]| -> Result<Vec<f64>> {
        threads::pool()
            .install(|| imgs.par_iter().map(high_band_energy).collect::<Result<Vec<f64>>>())
    };
    let er = energies(real_images)?;
    let ef = energies(fake_images)?;
    Ok(SpectralGap {
        mean_real: mean(&er),
        mean_fake: mean(&ef),
        p_value: welch_p_value(&er, &ef),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sided Welch test p-value under the normal approximation (adequate at
/// the sample sizes used here).
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    let se = (sample_var(a) / a.len() as f64 + sample_var(b) / b.len() as f64).sqrt();
    let delta = mean(a) - mean(b);
    if se == 0.0 {
        return if delta == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (delta / se).abs();
    2.0 * normal_sf(z)
}

/// Standard normal survival function via the Abramowitz–Stegun 7.1.26
/// polynomial for erf (|error| < 1.5e-7).
fn normal_sf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erfc = poly * (-x * x).exp();
    0.5 * erfc
}

// ── Image and corpus I/O ────────────────────────────────────────────────

fn quantize(image: &Tensor) -> Vec<u8> {
    image.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes a `[3,N,N]` tensor as binary PPM (P6, maxval 255), quantizing each
/// channel to 8 bits by rounding.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected [3,N,N], got {:?}", image.shape)));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let plane = h * w;
    let q = quantize(image);
    let mut bytes = Vec::with_capacity(plane * 3 + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for p in 0..plane {
        bytes.push(q[p]);
        bytes.push(q[plane + p]);
        bytes.push(q[2 * plane + p]);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM written by [`write_ppm`] back into a `[3,N,N]` tensor
/// with values `q/255`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::MalformedImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedImage {
                path: path.to_path_buf(),
                reason: "truncated header".to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P6" {
        return Err(bad("not a binary PPM (missing P6 magic)"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimensions"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos || bytes.len() - pos < need {
        return Err(bad("truncated pixel data"));
    }
    let pix = &bytes[pos..];
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        data[p] = pix[3 * p] as f64 / 255.0;
        data[plane + p] = pix[3 * p + 1] as f64 / 255.0;
        data[2 * plane + p] = pix[3 * p + 2] as f64 / 255.0;
    }
    Tensor::new(vec![3, h, w], data)
}

/// Directory layout: `<root>/{train,val,test}/{real,fake}/img_%06d.ppm` plus
/// `manifest.csv` rows of `path,label,group_id,seed` (no header).
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    let mut manifest = String::new();
    for split in SplitName::ALL {
        for class in ["real", "fake"] {
            let dir = root.join(split.dir()).join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut counters = [0usize; 2];
        for sample in corpus.split(split) {
            let class = match sample.label {
                Label::Real => "real",
                Label::Fake => "fake",
            };
            let idx = &mut counters[sample.label.index()];
            let rel = format!("{}/{}/img_{:06}.ppm", split.dir(), class, idx);
            *idx += 1;
            write_ppm(&root.join(&rel), &sample.image)?;
            manifest.push_str(&format!("{rel},{class},{},{}\n", sample.group_id, sample.seed));
        }
    }
    let path = root.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Loads a corpus saved by [`save_corpus`]. Image values carry the 8-bit
/// quantization of the save step.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let manifest_path = root.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut corpus = Corpus { train: Vec::new(), val: Vec::new(), test: Vec::new(), image_size: 0 };
    let mut entries: Vec<(String, Label, u64, u64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |reason: String| Error::MalformedManifest {
            path: manifest_path.clone(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        if parts.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", parts.len())));
        }
        let label = match parts[1] {
            "real" => Label::Real,
            "fake" => Label::Fake,
            other => return Err(bad(format!("unknown label '{other}'"))),
        };
        let group_id: u64 =
            parts[2].parse().map_err(|_| bad(format!("bad group id '{}'", parts[2])))?;
        let seed: u64 = parts[3].parse().map_err(|_| bad(format!("bad seed '{}'", parts[3])))?;
        entries.push((parts[0].to_string(), label, group_id, seed));
    }
    let images: Vec<Tensor> = threads::pool().install(|| {
        entries
            .par_iter()
            .map(|(rel, ..)| read_ppm(&root.join(rel)))
            .collect::<Result<Vec<Tensor>>>()
    })?;
    for ((rel, label, group_id, seed), image) in entries.into_iter().zip(images) {
        if corpus.image_size == 0 {
            corpus.image_size = image.shape[1];
        }
        let sample = Sample { image, label, group_id, seed };
        if rel.starts_with("train/") {
            corpus.train.push(sample);
        } else if rel.starts_with("val/") {
            corpus.val.push(sample);
        } else if rel.starts_with("test/") {
            corpus.test.push(sample);
        } else {
            return Err(Error::MalformedManifest {
                path: manifest_path.clone(),
                reason: format!("path '{rel}' not under a known split"),
            });
        }
    }
    Ok(corpus)
}
