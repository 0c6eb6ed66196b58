//! Optimization loop: Adam with split learning rates for stitch alphas,
//! plateau-triggered decay, cross-entropy loss, and best-validation-accuracy
//! checkpoint selection. Fully deterministic for a fixed seed, independent of
//! the worker-thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{accuracy, Label};
use crate::network::DualBranchModel;
use crate::spectral::{
    apply_normalization, compute_spectral_feature, fit_branch_stats, Branch, BranchStats,
    Transform,
};
use crate::synth::{derive_seed, Corpus, Sample};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::threads;

/// Per-sample gradients are accumulated in fixed chunks of this many samples,
/// then the chunk sums are folded in chunk order. The chunk size is a
/// constant, so results never depend on how many workers ran.
const GRAD_CHUNK: usize = 8;

/// Hyperparameters. Defaults follow the training regime this artifact is
/// built around: Adam(0.9, 0.999, 1e-8), base lr 2e-4, stitch lr 1e-3,
/// batch 32, plateau factor 0.2 with patience 3.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub stitch_lr: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            base_lr: 2e-4,
            stitch_lr: 1e-3,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.2,
            plateau_patience: 3,
            max_epochs: 10,
            seed: 7,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.stitch_lr <= 0.0 || self.plateau_factor <= 0.0 {
            return Err(Error::invalid("TrainingConfig", "rates must be positive".to_string()));
        }
        if self.plateau_patience < 1 {
            return Err(Error::invalid("TrainingConfig", "patience must be at least 1".to_string()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::invalid(
                "TrainingConfig",
                "batch size and epoch count must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rates in effect during this epoch.
    pub base_lr: f64,
    pub stitch_lr: f64,
    /// Alpha snapshot per unit, `(rr, rd, dr, dd)`, taken after the epoch.
    pub alphas: Vec<[f64; 4]>,
}

/// The selected model state: highest validation accuracy, earliest epoch on
/// ties. Epoch 0 with NaN accuracy marks the untrained initial state, which
/// is only returned if training diverges before completing an epoch.
#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_acc: f64,
    pub flat_params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub best: BestCheckpoint,
    pub records: Vec<EpochRecord>,
    /// Set when a non-finite loss or gradient aborted training early; the
    /// best checkpoint then reflects the last good state.
    pub diverged: bool,
}

// ── Adam ────────────────────────────────────────────────────────────────

/// First and second moment buffers plus the shared timestep.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update. Parameters inside `stitch_range` use
/// `stitch_lr`, all others `base_lr`. A non-finite gradient aborts with its
/// flat index.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    base_lr: f64,
    stitch_lr: f64,
    stitch_range: &std::ops::Range<usize>,
    config: &TrainingConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { name: "flat".to_string(), index: bad });
    }
    state.t += 1;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let lr = if stitch_range.contains(&i) { stitch_lr } else { base_lr };
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

// ── Plateau schedule ────────────────────────────────────────────────────

/// Number of reductions the plateau rule fires over a full loss history:
/// each epoch whose loss fails to improve on the best seen before it extends
/// a streak; when the streak reaches `patience`, a reduction fires and the
/// streak resets. Improvement is strict (equal loss counts as no improvement).
pub fn plateau_reduction_count(history: &[f64], patience: usize) -> usize {
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    let mut reductions = 0usize;
    for &loss in history {
        if loss < best {
            best = loss;
            streak = 0;
        } else {
            streak += 1;
            if streak == patience {
                reductions += 1;
                streak = 0;
            }
        }
    }
    reductions
}

/// Replays the history; if a reduction fires exactly at its final epoch,
/// returns `current_lr × factor`, else `current_lr` unchanged. Calling this
/// once per epoch therefore yields `initial × factor^plateau_reduction_count`.
pub fn plateau_schedule(history: &[f64], current_lr: f64, config: &TrainingConfig) -> f64 {
    if history.is_empty() {
        return current_lr;
    }
    let fires_now = plateau_reduction_count(history, config.plateau_patience)
        > plateau_reduction_count(&history[..history.len() - 1], config.plateau_patience);
    if fires_now {
        current_lr * config.plateau_factor
    } else {
        current_lr
    }
}

// ── Dataset preparation ─────────────────────────────────────────────────

/// One split with both model inputs fully materialized, normalized, and
/// shaped `[1,3,N,N]` ready to feed the model.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub spatial: Vec<Tensor>,
    pub freq: Vec<Tensor>,
    pub labels: Vec<Label>,
    pub group_ids: Vec<u64>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Corpus with per-branch normalization applied, ready for the model.
/// Statistics are fitted on the training split only.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub spatial_stats: BranchStats,
    pub freq_stats: BranchStats,
    pub transform: Transform,
    pub image_size: usize,
}

fn raw_freq_maps(samples: &[Sample], transform: Transform) -> Result<Vec<Tensor>> {
    threads::pool().install(|| {
        samples
            .par_iter()
            .map(|s| compute_spectral_feature(&s.image, transform).map(|f| f.map))
            .collect()
    })
}

/// Normalizes one corpus split with existing statistics (used at evaluation
/// time, where the statistics come from the checkpoint).
pub fn prepare_split_with_stats(
    samples: &[Sample],
    transform: Transform,
    spatial_stats: &BranchStats,
    freq_stats: &BranchStats,
) -> Result<PreparedSplit> {
    let batched = |mut t: Tensor| {
        t.shape.insert(0, 1);
        t
    };
    let freq_raw = raw_freq_maps(samples, transform)?;
    Ok(PreparedSplit {
        spatial: samples
            .iter()
            .map(|s| batched(apply_normalization(&s.image, spatial_stats)))
            .collect(),
        freq: freq_raw.iter().map(|f| batched(apply_normalization(f, freq_stats))).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        group_ids: samples.iter().map(|s| s.group_id).collect(),
    })
}

/// Fits per-branch statistics on the training split, then normalizes all
/// three splits with them.
pub fn prepare_dataset(corpus: &Corpus, transform: Transform) -> Result<PreparedDataset> {
    if corpus.train.is_empty() {
        return Err(Error::EmptyInput { op: "prepare_dataset" });
    }
    let train_images: Vec<Tensor> = corpus.train.iter().map(|s| s.image.clone()).collect();
    let train_freq = raw_freq_maps(&corpus.train, transform)?;
    let spatial_stats = fit_branch_stats(&train_images, Branch::Spatial)?;
    let freq_stats = fit_branch_stats(&train_freq, Branch::Frequency)?;
    Ok(PreparedDataset {
        train: prepare_split_with_stats(&corpus.train, transform, &spatial_stats, &freq_stats)?,
        val: prepare_split_with_stats(&corpus.val, transform, &spatial_stats, &freq_stats)?,
        test: prepare_split_with_stats(&corpus.test, transform, &spatial_stats, &freq_stats)?,
        spatial_stats,
        freq_stats,
        transform,
        image_size: corpus.image_size,
    })
}

// ── Forward/backward plumbing ───────────────────────────────────────────

/// Mean loss and mean parameter gradient over the indexed batch. Per-sample
/// gradients are summed in fixed chunks, chunk results folded in order.
pub fn batch_forward_backward(
    model: &DualBranchModel,
    split: &PreparedSplit,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let blocks = model.param_blocks();
    let n_params = model.param_count();
    let chunk_results: Vec<(f64, Vec<f64>)> = threads::pool().install(|| {
        indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<(f64, Vec<f64>)> {
                let mut partial = vec![0.0; n_params];
                let mut loss_sum = 0.0;
                for &idx in chunk {
                    let mut tape = Tape::new();
                    let fwd =
                        model.forward_on_tape(&mut tape, &split.spatial[idx], &split.freq[idx], true)?;
                    let loss =
                        tape.softmax_cross_entropy(fwd.logits, &[split.labels[idx].index()])?;
                    tape.backward(loss)?;
                    loss_sum += tape.value(loss);
                    for (leaf, block) in fwd.param_leaves.iter().zip(&blocks) {
                        let g = tape.grad(*leaf).expect("tracked leaf has grad");
                        let dst = &mut partial[block.start..block.start + block.len];
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
                Ok((loss_sum, partial))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, partial) in &chunk_results {
        loss += l;
        for (g, p) in grads.iter_mut().zip(partial) {
            *g += p;
        }
    }
    let scale = 1.0 / indices.len() as f64;
    loss *= scale;
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok((loss, grads))
}

/// Forward-only pass over a split: mean cross-entropy loss and the fake-class
/// softmax probability per sample, in split order.
pub fn score_split(model: &DualBranchModel, split: &PreparedSplit) -> Result<(f64, Vec<f64>)> {
    let per_sample: Vec<(f64, f64)> = threads::pool().install(|| {
        (0..split.len())
            .into_par_iter()
            .map(|idx| -> Result<(f64, f64)> {
                let mut tape = Tape::new();
                let fwd =
                    model.forward_on_tape(&mut tape, &split.spatial[idx], &split.freq[idx], false)?;
                let loss = tape.softmax_cross_entropy(fwd.logits, &[split.labels[idx].index()])?;
                let z = tape.data(fwd.logits);
                let m = z[0].max(z[1]);
                let (e0, e1) = ((z[0] - m).exp(), (z[1] - m).exp());
                Ok((tape.value(loss), e1 / (e0 + e1)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mean_loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / split.len().max(1) as f64;
    Ok((mean_loss, per_sample.into_iter().map(|(_, p)| p).collect()))
}

// ── Training loop ───────────────────────────────────────────────────────

/// Trains the model in place and returns the best checkpoint (highest
/// validation accuracy, earliest epoch on ties) plus the per-epoch log.
/// On return the model carries the best checkpoint's parameters.
///
/// Deterministic: data order is shuffled by a generator seeded from
/// `(config.seed, epoch)`; batch gradients reduce in fixed order.
pub fn train(
    model: &mut DualBranchModel,
    dataset: &PreparedDataset,
    config: &TrainingConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }

    let mut flat = model.flatten_params();
    let mut adam = AdamState::new(flat.len());
    let stitch_range = model.stitch_param_range();
    let (mut base_lr, mut stitch_lr) = (config.base_lr, config.stitch_lr);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best: Option<BestCheckpoint> = None;
    let initial = flat.clone();
    let mut diverged = false;

    'epochs: for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (batch_loss, grads) = batch_forward_backward(model, &dataset.train, batch)?;
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            adam_step(&mut flat, &grads, &mut adam, base_lr, stitch_lr, &stitch_range, config)?;
            model.load_flat_params(&flat)?;
            loss_weighted += batch_loss * batch.len() as f64;
        }
        let train_loss = loss_weighted / dataset.train.len() as f64;

        let (val_loss, val_scores) = score_split(model, &dataset.val)?;
        if !val_loss.is_finite() {
            diverged = true;
            break 'epochs;
        }
        let val_acc = accuracy(&val_scores, &dataset.val.labels, 0.5)?;

        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            base_lr,
            stitch_lr,
            alphas: model.stitch_units.iter().map(|u| u.alphas()).collect(),
        });

        if best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            best = Some(BestCheckpoint { epoch, val_acc, flat_params: flat.clone() });
        }

        val_history.push(val_loss);
        let reduced = plateau_schedule(&val_history, base_lr, config);
        if reduced != base_lr {
            base_lr = reduced;
            stitch_lr *= config.plateau_factor;
        }
    }

    let best = best.unwrap_or(BestCheckpoint { epoch: 0, val_acc: f64::NAN, flat_params: initial });
    model.load_flat_params(&best.flat_params)?;
    Ok(TrainOutput { best, records, diverged })
}

// ── Metrics log ─────────────────────────────────────────────────────────

/// Exact header of the metrics CSV. Models with fewer than four stitch units
/// leave the surplus alpha cells empty.
pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_acc,base_lr,stitch_lr,\
alpha_rr_1,alpha_rd_1,alpha_dr_1,alpha_dd_1,\
alpha_rr_2,alpha_rd_2,alpha_dr_2,alpha_dd_2,\
alpha_rr_3,alpha_rd_3,alpha_dr_3,alpha_dd_3,\
alpha_rr_4,alpha_rd_4,alpha_dr_4,alpha_dd_4";

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.base_lr, r.stitch_lr
        ));
        for i in 0..4 {
            match r.alphas.get(i) {
                Some(a) => out.push_str(&format!(",{},{},{},{}", a[0], a[1], a[2], a[3])),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, StitchMode};

    fn toy_config() -> TrainingConfig {
        TrainingConfig {
            base_lr: 0.01,
            stitch_lr: 0.01,
            batch_size: 16,
            max_epochs: 5,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    /// Linearly separable two-feature task rendered as images: the left and
    /// right halves carry intensities (a, b); the class is sign(a − b).
    fn toy_dataset(n_train: usize, n_val: usize, seed: u64) -> PreparedDataset {
        use rand::Rng;
        let n = 16;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut make_split = |count: usize| {
            let mut spatial = Vec::new();
            let mut freq = Vec::new();
            let mut labels = Vec::new();
            let mut group_ids = Vec::new();
            for i in 0..count {
                let a: f64 = rng.gen_range(0.0..1.0);
                let delta: f64 = rng.gen_range(0.2..0.6);
                let fake = i % 2 == 0;
                let b = if fake { (a - delta).max(0.0) } else { (a + delta).min(1.0) };
                let mut img = vec![0.0; 3 * n * n];
                for c in 0..3 {
                    for y in 0..n {
                        for x in 0..n {
                            img[c * n * n + y * n + x] = if x < n / 2 { a } else { b };
                        }
                    }
                }
                let t = Tensor::new(vec![1, 3, n, n], img).unwrap();
                freq.push(t.clone());
                spatial.push(t);
                labels.push(if fake { Label::Fake } else { Label::Real });
                group_ids.push(i as u64);
            }
            PreparedSplit { spatial, freq, labels, group_ids }
        };
        let train = make_split(n_train);
        let val = make_split(n_val);
        let dummy_stats = |branch| BranchStats { mean: vec![0.0; 3], std: vec![1.0; 3], branch };
        PreparedDataset {
            train,
            val,
            test: PreparedSplit {
                spatial: vec![],
                freq: vec![],
                labels: vec![],
                group_ids: vec![],
            },
            spatial_stats: dummy_stats(Branch::Spatial),
            freq_stats: dummy_stats(Branch::Frequency),
            transform: Transform::Dct,
            image_size: n,
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = vec![1.5, -2.25, 0.0, 1e-3];
        let before = params.clone();
        let mut state = AdamState::new(4);
        let cfg = TrainingConfig::default();
        adam_step(&mut params, &[0.0; 4], &mut state, 2e-4, 1e-3, &(3..4), &cfg).unwrap();
        for (a, b) in params.iter().zip(&before) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With constant gradient at t = 1 the bias-corrected ratio is 1, so
        // the update magnitude equals lr up to eps.
        let cfg = TrainingConfig::default();
        for g in [1.0, -3.0, 0.25] {
            let mut params = vec![0.0];
            let mut state = AdamState::new(1);
            adam_step(&mut params, &[g], &mut state, 2e-4, 1e-3, &(1..1), &cfg).unwrap();
            assert!((params[0].abs() - 2e-4).abs() <= 1e-6, "g={g}: {}", params[0]);
            assert_eq!(params[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_param_groups_get_their_own_rates() {
        let cfg = TrainingConfig::default();
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[1.0, 1.0], &mut state, 2e-4, 1e-3, &(1..2), &cfg).unwrap();
        assert!((params[0].abs() - 2e-4).abs() <= 1e-6);
        assert!((params[1].abs() - 1e-3).abs() <= 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = TrainingConfig::default();
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        let err =
            adam_step(&mut params, &[0.0, f64::NAN], &mut state, 2e-4, 1e-3, &(0..0), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
    }

    #[test]
    fn plateau_fires_after_three_flat_epochs() {
        let cfg = TrainingConfig::default();
        let h = [1.0, 0.9, 0.92, 0.93, 0.95];
        assert_eq!(plateau_reduction_count(&h, 3), 1);
        // Walking epoch by epoch, the reduction lands exactly after epoch 5.
        let mut lr = 2e-4;
        for k in 1..=h.len() {
            lr = plateau_schedule(&h[..k], lr, &cfg);
        }
        assert!((lr - 4e-5).abs() < 1e-18, "lr = {lr}");
    }

    #[test]
    fn plateau_never_fires_on_strict_decrease() {
        let cfg = TrainingConfig::default();
        let h = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
        let mut lr = 2e-4;
        for k in 1..=h.len() {
            lr = plateau_schedule(&h[..k], lr, &cfg);
        }
        assert_eq!(lr, 2e-4);
    }

    #[test]
    fn plateau_streak_resets_on_improvement() {
        let cfg = TrainingConfig::default();
        let h = [1.0, 1.1, 0.8, 1.2];
        assert_eq!(plateau_reduction_count(&h, 3), 0);
        let mut lr = 2e-4;
        for k in 1..=h.len() {
            lr = plateau_schedule(&h[..k], lr, &cfg);
        }
        assert_eq!(lr, 2e-4);
    }

    #[test]
    fn plateau_schedule_is_pure_function_of_history() {
        // Folding the per-epoch rule equals factor^count on random histories.
        use rand::Rng;
        let cfg = TrainingConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let len = rng.gen_range(1..25);
            let h: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0_f64)).collect();
            let mut lr = 1.0;
            for k in 1..=h.len() {
                lr = plateau_schedule(&h[..k], lr, &cfg);
            }
            let expect = cfg.plateau_factor.powi(plateau_reduction_count(&h, 3) as i32);
            assert!((lr - expect).abs() <= 1e-15 * expect.max(1.0));
        }
    }

    #[test]
    fn toy_task_reaches_full_validation_accuracy() {
        let dataset = toy_dataset(120, 40, 5);
        let mut model = build_model(StitchMode::AllStitches, 16, 1).unwrap();
        let out = train(&mut model, &dataset, &toy_config()).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.best.val_acc, 1.0, "records: {:?}", out.records.last());
        assert!(out.best.epoch <= 5);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dataset = toy_dataset(48, 16, 8);
        let run = || {
            let mut model = build_model(StitchMode::OneStitch, 16, 2).unwrap();
            let cfg = TrainingConfig { max_epochs: 2, ..toy_config() };
            train(&mut model, &dataset, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.val_acc.to_bits(), rb.val_acc.to_bits());
            assert_eq!(ra.alphas, rb.alphas);
        }
        assert!(a
            .best
            .flat_params
            .iter()
            .zip(&b.best.flat_params)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn best_checkpoint_prefers_earliest_on_ties() {
        let dataset = toy_dataset(120, 40, 5);
        let mut model = build_model(StitchMode::AllStitches, 16, 1).unwrap();
        let out = train(&mut model, &dataset, &toy_config()).unwrap();
        let first_max = out
            .records
            .iter()
            .find(|r| r.val_acc >= out.best.val_acc)
            .map(|r| r.epoch)
            .unwrap();
        assert_eq!(out.best.epoch, first_max);
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        // An absurd rate pushes parameters to ~1e200 after one step, so the
        // next forward overflows and the loss goes non-finite.
        let dataset = toy_dataset(48, 16, 8);
        let mut model = build_model(StitchMode::NoStitch, 16, 2).unwrap();
        let cfg =
            TrainingConfig { base_lr: 1e200, stitch_lr: 1e200, max_epochs: 4, ..toy_config() };
        let out = train(&mut model, &dataset, &cfg).unwrap();
        assert!(out.diverged);
        assert!(out.best.flat_params.iter().all(|v| v.is_finite()));
        assert!(model.flatten_params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_split_is_rejected() {
        let dataset = toy_dataset(8, 0, 1);
        let mut model = build_model(StitchMode::NoStitch, 16, 2).unwrap();
        assert!(matches!(
            train(&mut model, &dataset, &toy_config()),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn fixed_batch_overfit_descends() {
        let dataset = toy_dataset(32, 4, 9);
        let mut model = build_model(StitchMode::AllStitches, 16, 6).unwrap();
        let cfg = toy_config();
        let mut flat = model.flatten_params();
        let mut adam = AdamState::new(flat.len());
        let range = model.stitch_param_range();
        let indices: Vec<usize> = (0..32).collect();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (loss, grads) = batch_forward_backward(&model, &dataset.train, &indices).unwrap();
            losses.push(loss);
            adam_step(&mut flat, &grads, &mut adam, 0.01, 0.01, &range, &cfg).unwrap();
            model.load_flat_params(&flat).unwrap();
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "no descent: {losses:?}"
        );
    }

    #[test]
    fn metrics_csv_has_documented_header_and_blank_tail() {
        let records = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.4,
            val_acc: 0.9,
            base_lr: 2e-4,
            stitch_lr: 1e-3,
            alphas: vec![[0.9, 0.1, 0.1, 0.9]],
        }];
        let csv = metrics_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,0.5,0.4,0.9,0.0002,0.001,0.9,0.1,0.1,0.9"));
        assert_eq!(row.matches(',').count(), METRICS_CSV_HEADER.matches(',').count());
    }
}
