//! Acceptance suite: one test per shipped criterion, each printing a
//! `[PASS]` line with its measured numbers. The heavy criteria share one
//! default corpus (1400 groups at 64×64, seed 7 → 2000/400/400 samples).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mdcs_core::gradcheck::{check_end_to_end, check_stitch_unit, Mutation};
use mdcs_core::metrics::{auc, Label};
use mdcs_core::network::{build_model, StitchMode};
use mdcs_core::spectral::{dct2d, dwt_haar2d, dwt_haar2d_inverse, fft_amplitude2d, Transform};
use mdcs_core::stitch::CrossStitchUnit;
use mdcs_core::synth::{build_corpus, load_corpus, save_corpus, welch_p_value, high_band_energy};
use mdcs_core::tensor::Tensor;
use mdcs_core::train::{
    plateau_schedule, prepare_dataset, score_split, train, TrainingConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// The default corpus, built once per process and shared by the heavy tests.
fn default_corpus_dir() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = DIR.get_or_init(|| {
        mdcs_core::threads::configure(
            std::thread::available_parallelism().map_or(1, |n| n.get()).min(4),
        );
        let tmp = tempfile::tempdir().expect("tempdir");
        let path = tmp.path().join("corpus");
        let corpus = build_corpus(1400, 64, [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0], 7)
            .expect("default corpus build");
        save_corpus(&corpus, &path).expect("default corpus save");
        (tmp, path)
    });
    path
}

fn rand_square(rng: &mut ChaCha12Rng, n: usize) -> Tensor {
    let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, n], data).unwrap()
}

#[test]
fn acceptance_01_stitch_gradient_exactness() {
    let started = Instant::now();
    let result = check_stitch_unit(7, 100, Mutation::None);
    assert!(
        result.max_rel_err <= 1e-6,
        "stitch gradients: max rel err {} > 1e-6",
        result.max_rel_err
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}, budget 10s");
    println!(
        "[PASS] stitch gradient exactness: 100 configs, max rel err {:.3e} in {:.2}s",
        result.max_rel_err,
        elapsed.as_secs_f64()
    );
}

/// Brute-force quadruple-sum DCT oracle, independent of the separable path.
fn dct2d_direct(x: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    let scale = 1.0 / (2.0 * nf).sqrt();
    let c = |k: usize| if k == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += x[a * n + b]
                        * ((2 * a + 1) as f64 * i as f64 * std::f64::consts::PI / (2.0 * nf)).cos()
                        * ((2 * b + 1) as f64 * j as f64 * std::f64::consts::PI / (2.0 * nf)).cos();
                }
            }
            out[i * n + j] = scale * c(i) * c(j) * acc;
        }
    }
    out
}

#[test]
fn acceptance_02_dct_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for n in [2usize, 4, 8, 16] {
        for _ in 0..50 {
            let x = rand_square(&mut rng, n);
            let fast = dct2d(&x).unwrap();
            let direct = dct2d_direct(&x.data, n);
            for (a, b) in fast.data.iter().zip(&direct) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10, "separable vs direct DCT: max abs err {worst}");

    let ones = Tensor::filled(vec![8, 8], 1.0);
    let d = dct2d(&ones).unwrap();
    for (i, &v) in d.data.iter().enumerate() {
        if i != 0 {
            assert!(v.abs() <= 1e-12, "constant image off-DC coefficient {v} at {i}");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}, budget 30s");
    println!(
        "[PASS] DCT oracle equivalence: 50×{{2,4,8,16}} inputs, max abs err {:.3e} in {:.2}s",
        worst,
        elapsed.as_secs_f64()
    );
}

#[test]
fn acceptance_03_transform_identities() {
    let mut rng = ChaCha12Rng::seed_from_u64(303);

    // Parseval for the unnormalized DFT: Σ|X|² = N²·Σ|x|².
    let mut worst_parseval = 0.0f64;
    for _ in 0..20 {
        let x = rand_square(&mut rng, 8);
        let amp = fft_amplitude2d(&x).unwrap();
        let lhs: f64 = amp.data.iter().map(|v| v * v).sum();
        let rhs: f64 = 64.0 * x.data.iter().map(|v| v * v).sum::<f64>();
        worst_parseval = worst_parseval.max((lhs - rhs).abs() / rhs.abs());
    }
    assert!(worst_parseval <= 1e-10, "Parseval rel err {worst_parseval}");

    // Haar round trip.
    let mut worst_haar = 0.0f64;
    for _ in 0..20 {
        let x = rand_square(&mut rng, 16);
        let back = dwt_haar2d_inverse(&dwt_haar2d(&x).unwrap()).unwrap();
        for (a, b) in x.data.iter().zip(&back.data) {
            worst_haar = worst_haar.max((a - b).abs());
        }
    }
    assert!(worst_haar <= 1e-10, "Haar round-trip err {worst_haar}");

    // Amplitude spectrum is invariant under circular shifts.
    let mut worst_shift = 0.0f64;
    for _ in 0..20 {
        let n = 8;
        let x = rand_square(&mut rng, n);
        let (si, sj) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let mut shifted = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                shifted[((i + si) % n) * n + (j + sj) % n] = x.data[i * n + j];
            }
        }
        let a = fft_amplitude2d(&x).unwrap();
        let b = fft_amplitude2d(&Tensor::new(vec![n, n], shifted).unwrap()).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            worst_shift = worst_shift.max((p - q).abs());
        }
    }
    assert!(worst_shift <= 1e-10, "shift invariance err {worst_shift}");
    println!(
        "[PASS] transform identities: Parseval {:.2e}, Haar round-trip {:.2e}, shift invariance {:.2e}",
        worst_parseval, worst_haar, worst_shift
    );
}

#[test]
fn acceptance_04_identity_reduction() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let n = 32;
    let mut stitched = build_model(StitchMode::AllStitches, n, 44).unwrap();
    for u in stitched.stitch_units.iter_mut() {
        *u = CrossStitchUnit::identity();
    }
    let mut plain = build_model(StitchMode::NoStitch, n, 44).unwrap();
    plain.spatial = stitched.spatial.clone();
    plain.frequency = stitched.frequency.clone();
    plain.classifier_weight = stitched.classifier_weight.clone();
    plain.classifier_bias = stitched.classifier_bias.clone();

    for batch in 0..20 {
        let mk = |rng: &mut ChaCha12Rng| {
            let data: Vec<f64> = (0..2 * 3 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![2, 3, n, n], data).unwrap()
        };
        let s = mk(&mut rng);
        let f = mk(&mut rng);
        let a = stitched.model_forward(&s, &f).unwrap();
        let b = plain.model_forward(&s, &f).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "batch {batch}: logits differ bitwise");
        }
    }
    println!("[PASS] identity reduction: 20 random batches bitwise equal");
}

#[test]
fn acceptance_05_end_to_end_gradients() {
    let started = Instant::now();
    let result = check_end_to_end(7);
    assert!(
        result.max_rel_err <= 1e-5,
        "end-to-end gradients: max rel err {} > 1e-5",
        result.max_rel_err
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}, budget 5min");
    println!(
        "[PASS] end-to-end gradients: 25 params incl. all alphas, max rel err {:.3e} in {:.1}s",
        result.max_rel_err,
        elapsed.as_secs_f64()
    );
}

/// Brute-force pair counting with half ties, the AUC oracle.
fn auc_pairs(scores: &[f64], labels: &[Label]) -> f64 {
    let mut correct = 0.0;
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != Label::Fake {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != Label::Real {
                continue;
            }
            total += 1.0;
            if scores[i] > scores[j] {
                correct += 1.0;
            } else if scores[i] == scores[j] {
                correct += 0.5;
            }
        }
    }
    correct / total
}

#[test]
fn acceptance_06_auc_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(606);
    let mut checked = 0usize;
    while checked < 1000 {
        let len = rng.gen_range(2..=50);
        // Coarse quantization forces tie groups.
        let levels = rng.gen_range(2..10);
        let scores: Vec<f64> =
            (0..len).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<Label> = (0..len)
            .map(|_| if rng.gen_bool(0.5) { Label::Fake } else { Label::Real })
            .collect();
        let has_both = labels.contains(&Label::Fake)
            && labels.contains(&Label::Real);
        if !has_both {
            continue;
        }
        let fast = auc(&scores, &labels).unwrap();
        let slow = auc_pairs(&scores, &labels);
        assert_eq!(fast, slow, "instance {checked}: rank AUC {fast} != pair count {slow}");
        checked += 1;
    }
    println!("[PASS] AUC oracle: rank-based equals pair counting exactly on 1000 instances");
}

/// Reference plateau simulation, independent of the shipped implementation.
fn reference_lr_trace(history: &[f64], initial: f64, factor: f64, patience: usize) -> Vec<f64> {
    let mut lr = initial;
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    let mut trace = Vec::new();
    for &loss in history {
        if loss < best {
            best = loss;
            streak = 0;
        } else {
            streak += 1;
            if streak == patience {
                lr *= factor;
                streak = 0;
            }
        }
        trace.push(lr);
    }
    trace
}

#[test]
fn acceptance_07_plateau_schedule() {
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let config = TrainingConfig::default();
    for case in 0..200 {
        let len = rng.gen_range(1..40);
        // Mix fresh draws with repeats of earlier losses to exercise ties.
        let mut history: Vec<f64> = Vec::with_capacity(len);
        for _ in 0..len {
            if !history.is_empty() && rng.gen_bool(0.2) {
                let idx = rng.gen_range(0..history.len());
                history.push(history[idx]);
            } else {
                history.push(rng.gen_range(0.0..2.0));
            }
        }
        let expected = reference_lr_trace(&history, 2e-4, 0.2, 3);
        let mut lr = 2e-4;
        for (k, want) in expected.iter().enumerate() {
            lr = plateau_schedule(&history[..k + 1], lr, &config);
            assert_eq!(lr, *want, "case {case}, epoch {}: lr {lr} != reference {want}", k + 1);
        }
    }
    println!("[PASS] plateau schedule matches reference simulation on 200 histories");
}

#[test]
fn acceptance_08_desk_scale_learning() {
    let started = Instant::now();
    let corpus = load_corpus(default_corpus_dir()).expect("load default corpus");
    assert_eq!(corpus.train.len(), 2000);
    assert_eq!(corpus.val.len(), 400);
    assert_eq!(corpus.test.len(), 400);

    let dataset = prepare_dataset(&corpus, Transform::Dct).unwrap();
    let mut model = build_model(StitchMode::AllStitches, 64, 7).unwrap();
    let config = TrainingConfig::default(); // 10 epochs, seed 7
    let output = train(&mut model, &dataset, &config).unwrap();
    assert!(!output.diverged);

    let (_, scores) = score_split(&model, &dataset.test).unwrap();
    let test_auc = auc(&scores, &dataset.test.labels).unwrap();
    let elapsed = started.elapsed();
    assert!(
        test_auc >= 0.95,
        "test AUC {test_auc} < 0.95 (best epoch {}, val acc {})",
        output.best.epoch,
        output.best.val_acc
    );
    assert!(elapsed < Duration::from_secs(20 * 60), "took {elapsed:?}, budget 20min");
    println!(
        "[PASS] desk-scale learning: test AUC {:.4} within 10 epochs in {:.0}s",
        test_auc,
        elapsed.as_secs_f64()
    );
}

#[test]
fn acceptance_09_ablation_trend() {
    let corpus_dir = default_corpus_dir();
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("ablation.csv");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_mdcs"))
        .env("MDCS_THREADS", "4")
        .arg("ablate")
        .arg("--data")
        .arg(corpus_dir)
        .arg("--out")
        .arg(&csv_path)
        .status()
        .expect("spawn mdcs ablate");
    assert!(status.success(), "ablate failed");

    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut aucs = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        aucs.insert(
            (cells[1].to_string(), cells[2].to_string()),
            cells[3].parse::<f64>().unwrap(),
        );
    }
    assert_eq!(text.lines().count(), 9, "expected 8 result rows:\n{text}");

    let all = aucs[&("all".to_string(), "dct".to_string())];
    let one = aucs[&("one".to_string(), "dct".to_string())];
    let none = aucs[&("none".to_string(), "dct".to_string())];
    let rgb = aucs[&("rgb".to_string(), "dct".to_string())];
    let freq = aucs[&("freq".to_string(), "dct".to_string())];

    assert!(all >= one - 0.01, "AUC(all)={all} < AUC(one)={one} - 0.01");
    assert!(one >= none - 0.01, "AUC(one)={one} < AUC(none)={none} - 0.01");
    let best_single = rgb.max(freq);
    assert!(all >= best_single - 0.02, "AUC(all)={all} < max(single)={best_single} - 0.02");
    println!(
        "[PASS] ablation trend: all {:.4} ≥ one {:.4} − 0.01 ≥ none {:.4} − 0.02; singles rgb {:.4} freq {:.4}",
        all, one, none, rgb, freq
    );
}

#[test]
fn acceptance_10_spectrum_separation() {
    let corpus = load_corpus(default_corpus_dir()).expect("load default corpus");
    let reals: Vec<f64> = corpus
        .test
        .iter()
        .filter(|s| s.label == Label::Real)
        .map(|s| high_band_energy(&s.image).unwrap())
        .collect();
    let fakes: Vec<f64> = corpus
        .test
        .iter()
        .filter(|s| s.label == Label::Fake)
        .map(|s| high_band_energy(&s.image).unwrap())
        .collect();
    assert_eq!(reals.len(), 200);
    assert_eq!(fakes.len(), 200);
    let p = welch_p_value(&reals, &fakes);
    assert!(p < 0.01, "highest-band energies not separated: p = {p}");

    // The shipped spectrum command must surface the same separation in its
    // band CSVs for the two test directories.
    let tmp = tempfile::tempdir().unwrap();
    let band3 = |class: &str| -> f64 {
        let out = tmp.path().join(format!("{class}.ppm"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mdcs"))
            .env("MDCS_THREADS", "4")
            .arg("spectrum")
            .arg("--input")
            .arg(default_corpus_dir().join("test").join(class))
            .args(["--transform", "dct"])
            .arg("--out")
            .arg(&out)
            .status()
            .expect("spawn mdcs spectrum");
        assert!(status.success());
        let csv = std::fs::read_to_string(tmp.path().join(format!("{class}.bands.csv"))).unwrap();
        csv.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };
    let real_band = band3("real");
    let fake_band = band3("fake");
    assert!(
        (real_band - fake_band).abs() > 1e-6,
        "directory-level band means coincide: {real_band} vs {fake_band}"
    );
    println!(
        "[PASS] spectrum separation: Welch p = {:.3e} over 200v200; band means real {:.4} vs fake {:.4}",
        p, real_band, fake_band
    );
}
