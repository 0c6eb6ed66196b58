//! Finite-difference verification suites for every analytic gradient path:
//! the cross-stitch unit, each layer type, and the assembled model end to
//! end. The central-difference oracle is the arbiter throughout.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::network::{build_model, StitchMode};
use crate::stitch::{stitch_backward, stitch_forward, CrossStitchUnit};
use crate::synth::derive_seed;
use crate::tape::Tape;
use crate::tensor::{block_relative_error, finite_difference_grad, Tensor};

/// Tolerance for single-layer suites.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for the end-to-end suite.
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

/// Fault injection for verifying that the checker catches broken gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Flips the sign of the analytic stitch alpha gradients.
    StitchAlphaSignFlip,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Relative error for a single sampled scalar. The floor guards the
/// comparison against finite-difference rounding noise when the true
/// gradient is numerically tiny.
fn scalar_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn finish(name: &'static str, tolerance: f64, max_rel_err: f64, started: Instant) -> SuiteResult {
    SuiteResult {
        name,
        max_rel_err,
        tolerance,
        passed: max_rel_err <= tolerance,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Runs every suite with the given seed. `mutation` injects a deliberate
/// fault (test fixture; `Mutation::None` for real checking).
pub fn run_all(seed: u64, mutation: Mutation) -> Vec<SuiteResult> {
    vec![
        check_stitch_unit(seed, 100, mutation),
        check_separable_conv(seed),
        check_maxpool(seed),
        check_relu(seed),
        check_dense(seed),
        check_cross_entropy(seed),
        check_end_to_end(seed),
    ]
}

/// Analytic stitch backward vs central differences over random
/// `(alpha, x_r, x_d)` configurations. Compares three gradient blocks per
/// configuration: both input maps and the four-alpha vector.
pub fn check_stitch_unit(seed: u64, configs: usize, mutation: Mutation) -> SuiteResult {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let shape = vec![1, 2, 4, 4];
        let xr = rand_tensor(&mut rng, shape.clone(), -1.0, 1.0);
        let xd = rand_tensor(&mut rng, shape.clone(), -1.0, 1.0);
        let ur = rand_tensor(&mut rng, shape.clone(), -1.0, 1.0);
        let ud = rand_tensor(&mut rng, shape.clone(), -1.0, 1.0);
        let alphas: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let unit = CrossStitchUnit::from_alphas(alphas);

        let loss = |xr: &Tensor, xd: &Tensor, unit: &CrossStitchUnit| -> f64 {
            let (or, od) = stitch_forward(xr, xd, unit).unwrap();
            or.data.iter().zip(&ur.data).map(|(a, b)| a * b).sum::<f64>()
                + od.data.iter().zip(&ud.data).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut grads = stitch_backward(&ur, &ud, &xr, &xd, &unit).unwrap();
        if mutation == Mutation::StitchAlphaSignFlip {
            for a in grads.dalpha.iter_mut() {
                *a = -*a;
            }
        }

        let fd_xr = finite_difference_grad(|t| loss(t, &xd, &unit), &xr, 1e-6);
        let fd_xd = finite_difference_grad(|t| loss(&xr, t, &unit), &xd, 1e-6);
        let alpha_t = Tensor::new(vec![4], alphas.to_vec()).unwrap();
        let fd_alpha = finite_difference_grad(
            |t| loss(&xr, &xd, &CrossStitchUnit::from_alphas([t.data[0], t.data[1], t.data[2], t.data[3]])),
            &alpha_t,
            1e-6,
        );
        worst = worst
            .max(block_relative_error(&grads.dx_r.data, &fd_xr.data))
            .max(block_relative_error(&grads.dx_d.data, &fd_xd.data))
            .max(block_relative_error(&grads.dalpha, &fd_alpha.data));
    }
    finish("stitch_unit", LAYER_TOLERANCE, worst, started)
}

/// Shared scaffolding for layer suites: runs `forward` on a tape (batch 1),
/// takes the probe loss `Σ w ⊙ out` with fixed random weights, and compares
/// tape gradients of every input against central differences.
fn check_layer<F>(
    name: &'static str,
    seed: u64,
    salt: u64,
    inputs: Vec<Tensor>,
    forward: F,
) -> SuiteResult
where
    F: Fn(&mut Tape, &[crate::tape::TensorId]) -> crate::tape::TensorId,
{
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, salt));

    // Probe weights drawn once per suite against the forward output size.
    let out_numel = {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = forward(&mut tape, &ids);
        assert_eq!(tape.shape(out)[0], 1, "layer suites use batch 1");
        tape.data(out).len()
    };
    let w: Vec<f64> = (0..out_numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let run = |args: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<_> = args
            .iter()
            .map(|t| tape.leaf_from(t.shape.clone(), t.data.clone(), true))
            .collect();
        let out = forward(&mut tape, &ids);
        // Σ w ⊙ out as a single-row dense dot product.
        let flat = tape.flatten(out);
        let w_row = tape.leaf_from(vec![1, out_numel], w.clone(), false);
        let zero_b = tape.leaf_from(vec![1], vec![0.0], false);
        let dot = tape.dense(flat, w_row, zero_b).unwrap();
        let loss = tape.sum(dot);
        tape.backward(loss).unwrap();
        (
            tape.value(loss),
            ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect(),
        )
    };

    let (_, analytic) = run(&inputs);
    let mut worst = 0.0f64;
    for slot in 0..inputs.len() {
        let fd = finite_difference_grad(
            |probe| {
                let mut args = inputs.clone();
                args[slot] = probe.clone();
                run(&args).0
            },
            &inputs[slot],
            1e-6,
        );
        worst = worst.max(block_relative_error(&analytic[slot], &fd.data));
    }
    finish(name, LAYER_TOLERANCE, worst, started)
}

pub fn check_separable_conv(seed: u64) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let inputs = vec![
        rand_tensor(&mut rng, vec![1, 3, 6, 6], -1.0, 1.0),
        rand_tensor(&mut rng, vec![3, 3, 3], -1.0, 1.0),
        rand_tensor(&mut rng, vec![4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, vec![4], -1.0, 1.0),
    ];
    check_layer("separable_conv2d", seed, 11, inputs, |tape, ids| {
        tape.separable_conv2d(ids[0], ids[1], ids[2], ids[3]).unwrap()
    })
}

pub fn check_maxpool(seed: u64) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 2));
    // Jitter every cell so window maxima are unique and the finite
    // difference never crosses an argmax switch.
    let mut x = rand_tensor(&mut rng, vec![1, 2, 8, 8], -1.0, 1.0);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v += i as f64 * 1e-3;
    }
    check_layer("maxpool2d", seed, 12, vec![x], |tape, ids| tape.maxpool2d(ids[0]).unwrap())
}

pub fn check_relu(seed: u64) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 3));
    // Inputs at least 0.05 away from the kink.
    let data: Vec<f64> = (0..2 * 4 * 4)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new(vec![1, 2, 4, 4], data).unwrap();
    check_layer("relu", seed, 13, vec![x], |tape, ids| tape.relu(ids[0]))
}

pub fn check_dense(seed: u64) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 4));
    let inputs = vec![
        rand_tensor(&mut rng, vec![1, 6], -1.0, 1.0),
        rand_tensor(&mut rng, vec![4, 6], -1.0, 1.0),
        rand_tensor(&mut rng, vec![4], -1.0, 1.0),
    ];
    check_layer("dense", seed, 14, inputs, |tape, ids| {
        tape.dense(ids[0], ids[1], ids[2]).unwrap()
    })
}

pub fn check_cross_entropy(seed: u64) -> SuiteResult {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 5));
    let logits = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
    let labels = [0usize, 1, 1, 0];
    let run = |t: &Tensor| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let li = tape.leaf_from(t.shape.clone(), t.data.clone(), true);
        let loss = tape.softmax_cross_entropy(li, &labels).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss), tape.grad(li).unwrap().to_vec())
    };
    let (_, analytic) = run(&logits);
    let fd = finite_difference_grad(|t| run(t).0, &logits, 1e-6);
    finish(
        "softmax_cross_entropy",
        LAYER_TOLERANCE,
        block_relative_error(&analytic, &fd.data),
        started,
    )
}

/// Full-model check: 25 sampled parameters (all 16 stitch alphas plus 9
/// random backbone weights) on a 2-sample batch.
pub fn check_end_to_end(seed: u64) -> SuiteResult {
    let started = Instant::now();
    let n = 32;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 6));
    let model = build_model(StitchMode::AllStitches, n, derive_seed(seed, 7)).unwrap();
    let spatial = rand_tensor(&mut rng, vec![2, 3, n, n], -1.0, 1.0);
    let freq = rand_tensor(&mut rng, vec![2, 3, n, n], -1.0, 1.0);
    let labels = [0usize, 1];

    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &spatial, &freq, true).unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let blocks = model.param_blocks();
    let mut analytic = vec![0.0; model.param_count()];
    for (leaf, block) in fwd.param_leaves.iter().zip(&blocks) {
        analytic[block.start..block.start + block.len].copy_from_slice(tape.grad(*leaf).unwrap());
    }

    let alpha_range = model.stitch_param_range();
    let mut picks: Vec<usize> = alpha_range.clone().collect();
    while picks.len() < 25 {
        let idx = rng.gen_range(0..alpha_range.start);
        if !picks.contains(&idx) {
            picks.push(idx);
        }
    }

    let flat = model.flatten_params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &idx in &picks {
        let mut probe = model.clone();
        let mut eval = |delta: f64| -> f64 {
            let mut params = flat.clone();
            params[idx] += delta;
            probe.load_flat_params(&params).unwrap();
            let mut t = Tape::new();
            let f = probe.forward_on_tape(&mut t, &spatial, &freq, false).unwrap();
            let l = t.softmax_cross_entropy(f.logits, &labels).unwrap();
            t.value(l)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(scalar_rel_err(analytic[idx], fd));
    }
    finish("end_to_end", END_TO_END_TOLERANCE, worst, started)
}
