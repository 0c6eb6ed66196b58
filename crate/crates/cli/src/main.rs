//! `mdcs` — corpus synthesis, spectrum analysis, training, evaluation,
//! gradient checking, and the ablation suite.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mdcs_core::checkpoint::Checkpoint;
use mdcs_core::error::Error;
use mdcs_core::gradcheck::{run_all, Mutation};
use mdcs_core::heatmap::render_heatmap;
use mdcs_core::metrics::{auc, group_average_scores, EvalReport, Label};
use mdcs_core::network::{build_model, StitchMode};
use mdcs_core::spectral::{
    average_spectrum, center_shift, radial_band_means, Branch, BranchStats, Transform,
};
use mdcs_core::synth::{build_corpus, load_corpus, read_ppm, save_corpus, SplitName};
use mdcs_core::tensor::Tensor;
use mdcs_core::train::{
    prepare_dataset, prepare_split_with_stats, score_split, train, write_metrics_csv,
    PreparedSplit, TrainingConfig,
};

#[derive(Parser)]
#[command(name = "mdcs", version, about = "Dual-branch spatial/frequency forgery detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic forgery corpus.
    Synth {
        /// Number of real/fake pairs (groups).
        #[arg(long, default_value_t = 1400)]
        n: usize,
        /// Square image side; must be even and ≥ 16 (divisible by 16 for training).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        /// Train/val/test fractions; decimals or a/b fractions, comma-separated.
        #[arg(long, default_value = "5/7,1/7,1/7", value_parser = parse_fractions)]
        split: Fractions,
    },
    /// Average the log-scaled spectrum of a directory of PPM images and
    /// render it as a heatmap (plus a 4-band radial-energy CSV).
    Spectrum {
        /// Directory containing .ppm images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_transform)]
        transform: Transform,
        /// Output heatmap (PPM). The band CSV lands next to it as *.bands.csv.
        #[arg(long)]
        out: PathBuf,
        /// Move the DC term to the center of the heatmap (fft only).
        #[arg(long, default_value_t = false)]
        center_shift: bool,
    },
    /// Train a model on a corpus directory; writes checkpoint.mdcs and
    /// metrics.csv into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: StitchMode,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Frequency-branch transform.
        #[arg(long, default_value = "dct", value_parser = parse_transform)]
        transform: Transform,
    },
    /// Evaluate a checkpoint on one corpus split; writes a CSV report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
    },
    /// Run every finite-difference gradient suite and report per-suite
    /// maximum relative errors.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Test fixture: negate the analytic stitch alpha gradients to prove
        /// the checker catches broken backward rules.
        #[arg(long, hide = true, default_value_t = false)]
        inject_stitch_sign_flip: bool,
    },
    /// Train every ablation configuration (five stitch modes plus the three
    /// frequency transforms) and tabulate test AUC per configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
    },
}

#[derive(Clone, Debug)]
struct Fractions([f64; 3]);

fn parse_fraction_term(s: &str) -> Result<f64, String> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| format!("bad fraction '{s}'"))?;
        let d: f64 = den.trim().parse().map_err(|_| format!("bad fraction '{s}'"))?;
        if d == 0.0 {
            return Err(format!("zero denominator in '{s}'"));
        }
        Ok(n / d)
    } else {
        s.trim().parse().map_err(|_| format!("bad fraction '{s}'"))
    }
}

fn parse_fractions(s: &str) -> Result<Fractions, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated fractions, got '{s}'"));
    }
    let mut f = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        f[i] = parse_fraction_term(p)?;
    }
    Ok(Fractions(f))
}

fn parse_transform(s: &str) -> Result<Transform, String> {
    Transform::from_tag(s).ok_or_else(|| format!("unknown transform '{s}' (dct|fft|dwt)"))
}

fn parse_mode(s: &str) -> Result<StitchMode, String> {
    StitchMode::from_tag(s).ok_or_else(|| format!("unknown mode '{s}' (rgb|freq|none|one|all)"))
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        _ => Err(format!("unknown split '{s}' (train|val|test)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { n, size, seed, out, split } => cmd_synth(n, size, seed, &out, split.0),
        Command::Spectrum { input, transform, out, center_shift } => {
            cmd_spectrum(&input, transform, &out, center_shift)
        }
        Command::Train { data, mode, epochs, seed, out, transform } => {
            cmd_train(&data, mode, epochs, seed, &out, transform)
        }
        Command::Eval { model, data, report, split } => cmd_eval(&model, &data, &report, split),
        Command::Gradcheck { seed, inject_stitch_sign_flip } => {
            return cmd_gradcheck(seed, inject_stitch_sign_flip);
        }
        Command::Ablate { data, out, epochs } => cmd_ablate(&data, &out, epochs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path, fractions: [f64; 3]) -> Result<(), Error> {
    let corpus = build_corpus(n, size, fractions, seed)?;
    save_corpus(&corpus, out)?;
    for split in SplitName::ALL {
        let (real, fake) = corpus.class_counts(split);
        println!("{}: {} real + {} fake", split.dir(), real, fake);
    }
    println!("corpus written to {}", out.display());
    Ok(())
}

fn cmd_spectrum(input: &Path, transform: Transform, out: &Path, shift: bool) -> Result<(), Error> {
    if shift && transform != Transform::FftAmplitude {
        // Flag misuse is a usage error.
        eprintln!("error: --center-shift only applies to --transform fft");
        std::process::exit(2);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Io { path: input.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput { op: "cmd_spectrum" });
    }

    // Every channel of every image contributes one frame.
    let mut frames = Vec::with_capacity(paths.len() * 3);
    for p in &paths {
        let img = read_ppm(p)?;
        let n = img.shape[1];
        for c in 0..3 {
            frames.push(Tensor::new(vec![n, n], img.data[c * n * n..][..n * n].to_vec())?);
        }
    }
    let avg = average_spectrum(&frames, transform)?;

    let bands = radial_band_means(&avg, 4)?;
    let mut csv = String::from("band,radial_lo,radial_hi,mean_log_energy\n");
    for (i, b) in bands.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", i, i as f64 / 4.0, (i + 1) as f64 / 4.0, b));
    }
    let csv_path = out.with_extension("bands.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::Io { path: csv_path.clone(), source: e })?;

    let display_map = if shift { center_shift(&avg)? } else { avg };
    render_heatmap(&display_map, out)?;
    println!("heatmap: {}", out.display());
    println!("bands:   {}", csv_path.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    mode: StitchMode,
    epochs: usize,
    seed: u64,
    out: &Path,
    transform: Transform,
) -> Result<(), Error> {
    let corpus = load_corpus(data)?;
    let dataset = prepare_dataset(&corpus, transform)?;
    let mut model = build_model(mode, dataset.image_size, seed)?;
    let config = TrainingConfig { max_epochs: epochs, seed, ..TrainingConfig::default() };
    let output = train(&mut model, &dataset, &config)?;
    for r in &output.records {
        println!(
            "epoch {:3}: train_loss {:.6} val_loss {:.6} val_acc {:.4} base_lr {:.2e}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.base_lr
        );
    }
    if output.diverged {
        eprintln!("warning: training diverged; keeping the last good checkpoint");
    }

    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let ck = Checkpoint {
        transform,
        spatial_stats: mode.uses_spatial().then(|| dataset.spatial_stats.clone()),
        freq_stats: mode.uses_frequency().then(|| dataset.freq_stats.clone()),
        model,
    };
    let ck_path = out.join("checkpoint.mdcs");
    ck.save(&ck_path)?;
    let csv_path = out.join("metrics.csv");
    write_metrics_csv(&output.records, &csv_path)?;
    println!(
        "best epoch {} (val acc {}); checkpoint: {}; metrics: {}",
        output.best.epoch,
        output.best.val_acc,
        ck_path.display(),
        csv_path.display()
    );
    Ok(())
}

/// Group-level view: scores averaged within each (group, label) cell, since a
/// pseudo-video group holds one real and one fake member.
fn group_level(scores: &[f64], split: &PreparedSplit) -> Result<(Vec<f64>, Vec<Label>), Error> {
    let keys: Vec<u64> = split
        .group_ids
        .iter()
        .zip(&split.labels)
        .map(|(g, l)| g * 2 + l.index() as u64)
        .collect();
    let grouped = group_average_scores(scores, &keys)?;
    let labels = grouped
        .iter()
        .map(|(key, _)| if key % 2 == 1 { Label::Fake } else { Label::Real })
        .collect();
    Ok((grouped.into_iter().map(|(_, s)| s).collect(), labels))
}

fn report_line(level: &str, report: &EvalReport) -> String {
    let auc_cell = report.auc.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{level},{},{},{auc_cell},{},{},{},{}\n",
        report.n_samples, report.accuracy, report.tp, report.tn, report.fp, report.fn_
    )
}

fn cmd_eval(model_path: &Path, data: &Path, report: &Path, split: SplitName) -> Result<(), Error> {
    let ck = Checkpoint::load(model_path)?;
    let corpus = load_corpus(data)?;
    if corpus.image_size != ck.model.input_size {
        return Err(Error::BadCheckpoint {
            path: model_path.to_path_buf(),
            reason: format!(
                "checkpoint expects {0}×{0} inputs but corpus is {1}×{1}",
                ck.model.input_size, corpus.image_size
            ),
        });
    }
    let unit = |branch| BranchStats { mean: vec![0.0; 3], std: vec![1.0; 3], branch };
    let spatial_stats = ck.spatial_stats.clone().unwrap_or_else(|| unit(Branch::Spatial));
    let freq_stats = ck.freq_stats.clone().unwrap_or_else(|| unit(Branch::Frequency));
    let samples = corpus.split(split);
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "cmd_eval" });
    }
    let prepared = prepare_split_with_stats(samples, ck.transform, &spatial_stats, &freq_stats)?;
    let (mean_loss, scores) = score_split(&ck.model, &prepared)?;

    let frame = EvalReport::from_scores(&scores, &prepared.labels, 0.5)?;
    let (g_scores, g_labels) = group_level(&scores, &prepared)?;
    let group = EvalReport::from_scores(&g_scores, &g_labels, 0.5)?;

    let mut csv = String::from("level,n,accuracy,auc,tp,tn,fp,fn\n");
    csv.push_str(&report_line("frame", &frame));
    csv.push_str(&report_line("group", &group));
    std::fs::write(report, csv).map_err(|e| Error::Io { path: report.to_path_buf(), source: e })?;

    println!("split: {} ({} samples, mean loss {:.6})", split.dir(), frame.n_samples, mean_loss);
    for (level, r) in [("frame", &frame), ("group", &group)] {
        match r.auc {
            Some(a) => println!(
                "{level}: accuracy {} auc {} (tp {} tn {} fp {} fn {})",
                r.accuracy, a, r.tp, r.tn, r.fp, r.fn_
            ),
            None => {
                println!(
                    "{level}: accuracy {} auc undefined (tp {} tn {} fp {} fn {})",
                    r.accuracy, r.tp, r.tn, r.fp, r.fn_
                );
                eprintln!("warning: {level}-level AUC is undefined (single-class split)");
            }
        }
    }
    println!("report: {}", report.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, inject: bool) -> ExitCode {
    // Command gate: every suite must come in at or under 1e-5.
    const GATE: f64 = 1e-5;
    let mutation = if inject { Mutation::StitchAlphaSignFlip } else { Mutation::None };
    let results = run_all(seed, mutation);
    let mut all_passed = true;
    for r in &results {
        let ok = r.max_rel_err <= GATE;
        println!(
            "suite {:<22} max_rel_err {:.3e} {} [{:.2}s]",
            r.name,
            r.max_rel_err,
            if ok { "PASS" } else { "FAIL" },
            r.seconds
        );
        all_passed &= ok;
    }
    println!(
        "{} of {} suites at or under {GATE:.0e}",
        results.iter().filter(|r| r.max_rel_err <= GATE).count(),
        results.len()
    );
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_ablate(data: &Path, out: &Path, epochs: usize) -> Result<(), Error> {
    let corpus = load_corpus(data)?;
    let seed = 7u64;

    let test_auc_for = |mode: StitchMode, transform: Transform| -> Result<f64, Error> {
        let dataset = prepare_dataset(&corpus, transform)?;
        let mut model = build_model(mode, dataset.image_size, seed)?;
        let config = TrainingConfig { max_epochs: epochs, seed, ..TrainingConfig::default() };
        let output = train(&mut model, &dataset, &config)?;
        let (_, scores) = score_split(&model, &dataset.test)?;
        let value = auc(&scores, &dataset.test.labels)?;
        eprintln!(
            "ablate: mode {} transform {} → test AUC {:.4} (best epoch {})",
            mode.tag(),
            transform.tag(),
            value,
            output.best.epoch
        );
        Ok(value)
    };

    // Five stitch-mode rows with DCT, then the three transform rows under
    // all-stitches; the DCT transform row reuses the all-stitches result.
    let mut rows: Vec<(StitchMode, Transform, f64)> = Vec::new();
    for mode in StitchMode::ALL {
        rows.push((mode, Transform::Dct, test_auc_for(mode, Transform::Dct)?));
    }
    let all_dct = rows[4].2;
    for transform in [Transform::DwtHaar, Transform::FftAmplitude] {
        rows.push((
            StitchMode::AllStitches,
            transform,
            test_auc_for(StitchMode::AllStitches, transform)?,
        ));
    }
    rows.push((StitchMode::AllStitches, Transform::Dct, all_dct));

    let mut csv = String::from("id,mode,transform,auc\n");
    for (i, (mode, transform, value)) in rows.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", i + 1, mode.tag(), transform.tag(), value));
    }
    std::fs::write(out, csv).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    println!("ablation table: {}", out.display());
    Ok(())
}
