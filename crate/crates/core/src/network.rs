//! The dual-branch model: two identical separable-convolution backbones over
//! spatial and frequency inputs, cross-stitch units after the pooling stages,
//! and a classifier over the concatenated fully-connected features.
//!
//! Each branch is four blocks of `separable_conv2d → relu → maxpool2d` with
//! channel widths 16, 32, 64, 128, followed by a dense layer to 128 features
//! with ReLU. Pooling is the only downsampler, so the input side must be
//! divisible by 16. The stitch mode selects the ablation topology.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stitch::CrossStitchUnit;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const WIDTHS: [usize; 4] = [16, 32, 64, 128];
const KERNEL: usize = 3;
const IN_CHANNELS: usize = 3;
const FC_FEATURES: usize = 128;
const CLASSES: usize = 2;

/// Ablation topology switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StitchMode {
    /// Spatial branch only; classifier input is 128.
    RgbOnly,
    /// Frequency branch only; classifier input is 128.
    FreqOnly,
    /// Both branches, concatenated features, no cross-stitch units.
    NoStitch,
    /// One cross-stitch unit after the first pooling stage.
    OneStitch,
    /// Four cross-stitch units, one after every pooling stage.
    AllStitches,
}

impl StitchMode {
    pub const ALL: [StitchMode; 5] = [
        StitchMode::RgbOnly,
        StitchMode::FreqOnly,
        StitchMode::NoStitch,
        StitchMode::OneStitch,
        StitchMode::AllStitches,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            StitchMode::RgbOnly => "rgb",
            StitchMode::FreqOnly => "freq",
            StitchMode::NoStitch => "none",
            StitchMode::OneStitch => "one",
            StitchMode::AllStitches => "all",
        }
    }

    pub fn from_tag(tag: &str) -> Option<StitchMode> {
        match tag {
            "rgb" => Some(StitchMode::RgbOnly),
            "freq" => Some(StitchMode::FreqOnly),
            "none" => Some(StitchMode::NoStitch),
            "one" => Some(StitchMode::OneStitch),
            "all" => Some(StitchMode::AllStitches),
            _ => None,
        }
    }

    pub fn uses_spatial(self) -> bool {
        self != StitchMode::FreqOnly
    }

    pub fn uses_frequency(self) -> bool {
        self != StitchMode::RgbOnly
    }

    pub fn stitch_count(self) -> usize {
        match self {
            StitchMode::OneStitch => 1,
            StitchMode::AllStitches => 4,
            _ => 0,
        }
    }

    /// Index of the stitch unit sitting after pooling stage `stage`, if any.
    fn stitch_after(self, stage: usize) -> Option<usize> {
        match self {
            StitchMode::OneStitch if stage == 0 => Some(0),
            StitchMode::AllStitches => Some(stage),
            _ => None,
        }
    }
}

/// One backbone block: depthwise `[C,3,3]`, pointwise `[C_out,C]`, bias `[C_out]`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
    pub bias: Tensor,
}

/// One branch: four conv blocks plus the dense layer to 128 features.
#[derive(Clone, Debug)]
pub struct Branch {
    pub blocks: Vec<ConvBlock>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

/// The assembled model. Branch presence follows the mode; each stitch unit
/// holds its four alpha scalars.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub mode: StitchMode,
    pub input_size: usize,
    pub seed: u64,
    pub spatial: Option<Branch>,
    pub frequency: Option<Branch>,
    pub stitch_units: Vec<CrossStitchUnit>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Handles into a tape after one forward pass.
pub struct TapeForward {
    pub logits: TensorId,
    /// One leaf per [`DualBranchModel::param_blocks`] entry, same order.
    pub param_leaves: Vec<TensorId>,
    /// Post-ReLU dense features per branch, when the branch exists.
    pub spatial_features: Option<TensorId>,
    pub frequency_features: Option<TensorId>,
}

fn he_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor { shape, data, grad: None, requires_grad: false }
}

fn init_branch(rng: &mut ChaCha12Rng, n: usize) -> Branch {
    let mut blocks = Vec::with_capacity(4);
    let mut c_in = IN_CHANNELS;
    for &c_out in WIDTHS.iter() {
        blocks.push(ConvBlock {
            depthwise: he_tensor(rng, vec![c_in, KERNEL, KERNEL], KERNEL * KERNEL),
            pointwise: he_tensor(rng, vec![c_out, c_in], c_in),
            bias: Tensor::zeros(vec![c_out]),
        });
        c_in = c_out;
    }
    let flat = WIDTHS[3] * (n / 16) * (n / 16);
    Branch {
        blocks,
        fc_weight: he_tensor(rng, vec![FC_FEATURES, flat], flat),
        fc_bias: Tensor::zeros(vec![FC_FEATURES]),
    }
}

/// Builds a model with seeded He initialization. Stitch units start at the
/// 0.9/0.1 convex initialization. Deterministic: the same `(mode, n, seed)`
/// always yields bit-identical parameters.
pub fn build_model(mode: StitchMode, n: usize, seed: u64) -> Result<DualBranchModel> {
    if n == 0 || !n.is_multiple_of(16) {
        return Err(Error::invalid(
            "build_model",
            format!("input side {n} must be a positive multiple of 16 (four pooling halvings)"),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let spatial = mode.uses_spatial().then(|| init_branch(&mut rng, n));
    let frequency = mode.uses_frequency().then(|| init_branch(&mut rng, n));
    let feat = if spatial.is_some() && frequency.is_some() { 2 * FC_FEATURES } else { FC_FEATURES };
    let classifier_weight = he_tensor(&mut rng, vec![CLASSES, feat], feat);
    let classifier_bias = Tensor::zeros(vec![CLASSES]);
    let stitch_units = (0..mode.stitch_count()).map(|_| CrossStitchUnit::new()).collect();
    Ok(DualBranchModel {
        mode,
        input_size: n,
        seed,
        spatial,
        frequency,
        stitch_units,
        classifier_weight,
        classifier_bias,
    })
}

impl DualBranchModel {
    /// Named parameter blocks in checkpoint order: spatial branch, frequency
    /// branch, classifier, then the alpha vectors of each stitch unit last.
    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let push = |blocks: &mut Vec<ParamBlock>, name: String, len: usize, offset: &mut usize| {
            blocks.push(ParamBlock { name, start: *offset, len });
            *offset += len;
        };
        for (branch, prefix) in [(&self.spatial, "spatial"), (&self.frequency, "frequency")] {
            if let Some(b) = branch {
                for (i, blk) in b.blocks.iter().enumerate() {
                    push(&mut blocks, format!("{prefix}.block{}.depthwise", i + 1), blk.depthwise.numel(), &mut offset);
                    push(&mut blocks, format!("{prefix}.block{}.pointwise", i + 1), blk.pointwise.numel(), &mut offset);
                    push(&mut blocks, format!("{prefix}.block{}.bias", i + 1), blk.bias.numel(), &mut offset);
                }
                push(&mut blocks, format!("{prefix}.fc.weight"), b.fc_weight.numel(), &mut offset);
                push(&mut blocks, format!("{prefix}.fc.bias"), b.fc_bias.numel(), &mut offset);
            }
        }
        push(&mut blocks, "classifier.weight".to_string(), self.classifier_weight.numel(), &mut offset);
        push(&mut blocks, "classifier.bias".to_string(), self.classifier_bias.numel(), &mut offset);
        for i in 0..self.stitch_units.len() {
            push(&mut blocks, format!("stitch{}.alphas", i + 1), 4, &mut offset);
        }
        blocks
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for branch in [&self.spatial, &self.frequency].into_iter().flatten() {
            for blk in &branch.blocks {
                out.push(&blk.depthwise);
                out.push(&blk.pointwise);
                out.push(&blk.bias);
            }
            out.push(&branch.fc_weight);
            out.push(&branch.fc_bias);
        }
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for branch in [&mut self.spatial, &mut self.frequency].into_iter().flatten() {
            for blk in &mut branch.blocks {
                out.push(&mut blk.depthwise);
                out.push(&mut blk.pointwise);
                out.push(&mut blk.bias);
            }
            out.push(&mut branch.fc_weight);
            out.push(&mut branch.fc_bias);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    /// All parameters as one flat vector in [`Self::param_blocks`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for t in self.param_tensors() {
            flat.extend_from_slice(&t.data);
        }
        for u in &self.stitch_units {
            flat.extend_from_slice(&u.alphas());
        }
        flat
    }

    /// Writes a flat vector produced by [`Self::flatten_params`] back in.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "load_flat_params",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut offset = 0usize;
        for t in self.param_tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        for u in self.stitch_units.iter_mut() {
            u.set_alphas([flat[offset], flat[offset + 1], flat[offset + 2], flat[offset + 3]]);
            offset += 4;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum::<usize>() + 4 * self.stitch_units.len()
    }

    /// Range of the flat vector holding stitch alphas (always the tail).
    pub fn stitch_param_range(&self) -> std::ops::Range<usize> {
        let total = self.param_count();
        total - 4 * self.stitch_units.len()..total
    }

    /// Records one forward pass on `tape`. Unused branch inputs are ignored.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        spatial_input: &Tensor,
        frequency_input: &Tensor,
        track_grads: bool,
    ) -> Result<TapeForward> {
        let check_input = |name: &str, t: &Tensor| -> Result<usize> {
            if t.shape.len() != 4
                || t.shape[1] != IN_CHANNELS
                || t.shape[2] != self.input_size
                || t.shape[3] != self.input_size
            {
                return Err(Error::shape(
                    "model_forward",
                    format!("{name} input must be [B,3,{0},{0}], got {1:?}", self.input_size, t.shape),
                ));
            }
            Ok(t.shape[0])
        };

        let mut batch = None;
        if self.mode.uses_spatial() {
            batch = Some(check_input("spatial", spatial_input)?);
        }
        if self.mode.uses_frequency() {
            let b = check_input("frequency", frequency_input)?;
            if let Some(prev) = batch {
                if prev != b {
                    return Err(Error::shape(
                        "model_forward",
                        format!("batch mismatch: spatial {prev} vs frequency {b}"),
                    ));
                }
            }
            batch = Some(b);
        }
        debug_assert!(batch.is_some());

        // Register parameter leaves in param_blocks order.
        let mut param_leaves = Vec::new();
        let mut branch_leaves: [Vec<TensorId>; 2] = [Vec::new(), Vec::new()];
        for (slot, branch) in [&self.spatial, &self.frequency].iter().enumerate() {
            if let Some(b) = branch {
                for blk in &b.blocks {
                    for t in [&blk.depthwise, &blk.pointwise, &blk.bias] {
                        let id = tape.leaf_from(t.shape.clone(), t.data.clone(), track_grads);
                        param_leaves.push(id);
                        branch_leaves[slot].push(id);
                    }
                }
                for t in [&b.fc_weight, &b.fc_bias] {
                    let id = tape.leaf_from(t.shape.clone(), t.data.clone(), track_grads);
                    param_leaves.push(id);
                    branch_leaves[slot].push(id);
                }
            }
        }
        let cls_w = tape.leaf_from(
            self.classifier_weight.shape.clone(),
            self.classifier_weight.data.clone(),
            track_grads,
        );
        let cls_b = tape.leaf_from(
            self.classifier_bias.shape.clone(),
            self.classifier_bias.data.clone(),
            track_grads,
        );
        param_leaves.push(cls_w);
        param_leaves.push(cls_b);
        let alpha_leaves: Vec<TensorId> = self
            .stitch_units
            .iter()
            .map(|u| tape.leaf_from(vec![4], u.alphas().to_vec(), track_grads))
            .collect();
        param_leaves.extend(&alpha_leaves);

        let mut s = self
            .mode
            .uses_spatial()
            .then(|| tape.leaf_from(spatial_input.shape.clone(), spatial_input.data.clone(), false));
        let mut f = self
            .mode
            .uses_frequency()
            .then(|| tape.leaf_from(frequency_input.shape.clone(), frequency_input.data.clone(), false));

        for stage in 0..4 {
            if let Some(x) = s {
                let ids = &branch_leaves[0][stage * 3..stage * 3 + 3];
                let conv = tape.separable_conv2d(x, ids[0], ids[1], ids[2])?;
                let act = tape.relu(conv);
                s = Some(tape.maxpool2d(act)?);
            }
            if let Some(x) = f {
                let ids = &branch_leaves[1][stage * 3..stage * 3 + 3];
                let conv = tape.separable_conv2d(x, ids[0], ids[1], ids[2])?;
                let act = tape.relu(conv);
                f = Some(tape.maxpool2d(act)?);
            }
            if let Some(unit_idx) = self.mode.stitch_after(stage) {
                let (sr, fd) = tape.stitch(s.unwrap(), f.unwrap(), alpha_leaves[unit_idx])?;
                s = Some(sr);
                f = Some(fd);
            }
        }

        let branch_features = |tape: &mut Tape, x: TensorId, leaves: &[TensorId]| -> Result<TensorId> {
            let flat = tape.flatten(x);
            let fc = tape.dense(flat, leaves[12], leaves[13])?;
            Ok(tape.relu(fc))
        };
        let spatial_features = match s {
            Some(x) => Some(branch_features(tape, x, &branch_leaves[0])?),
            None => None,
        };
        let frequency_features = match f {
            Some(x) => Some(branch_features(tape, x, &branch_leaves[1])?),
            None => None,
        };

        let features = match (spatial_features, frequency_features) {
            (Some(a), Some(b)) => tape.concat_features(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("at least one branch always exists"),
        };
        let logits = tape.dense(features, cls_w, cls_b)?;
        Ok(TapeForward { logits, param_leaves, spatial_features, frequency_features })
    }

    /// Inference-only forward pass; returns the `[B,2]` logits.
    pub fn model_forward(&self, spatial_input: &Tensor, frequency_input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, spatial_input, frequency_input, false)?;
        Ok(tape.tensor(fwd.logits))
    }
}

/// Closed-form parameter count for a given mode and input side.
///
/// Per branch: the conv blocks contribute `Σ (9·C_in + C_out·C_in + C_out)`
/// over `(C_in, C_out) ∈ (3,16),(16,32),(32,64),(64,128)`, which is 12 075,
/// and the dense layer contributes `128·(128·(n/16)²) + 128`. The classifier
/// adds `2·F + 2` where `F` is 128 (one branch) or 256 (two). Each stitch
/// unit adds 4.
pub fn expected_param_count(mode: StitchMode, n: usize) -> usize {
    let branch_conv = 12_075;
    let flat = 128 * (n / 16) * (n / 16);
    let branch = branch_conv + FC_FEATURES * flat + FC_FEATURES;
    let branches = usize::from(mode.uses_spatial()) + usize::from(mode.uses_frequency());
    let feat = branches * FC_FEATURES;
    branches * branch + CLASSES * feat + CLASSES + 4 * mode.stitch_count()
}
