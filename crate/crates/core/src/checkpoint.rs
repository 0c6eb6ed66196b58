//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "MDCS"
//! version    u32      1
//! mode       u8       0 rgb | 1 freq | 2 none | 3 one | 4 all
//! transform  u8       0 dct | 1 fft | 2 dwt
//! input_size u32      square input side N
//! seed       u64      model initialization seed
//! n_blocks   u32
//! blocks     n_blocks × { len: u64, values: len × f64 }
//! ```
//!
//! Block order: per present branch (spatial first) the normalization mean and
//! std, then every parameter block in [`DualBranchModel::param_blocks`] order
//! with the stitch alpha vectors last. The format is fully specified so other
//! implementations can interoperate.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build_model, DualBranchModel, StitchMode};
use crate::spectral::{Branch, BranchStats, Transform};

pub const MAGIC: &[u8; 4] = b"MDCS";
pub const VERSION: u32 = 1;

/// A model plus everything needed to reproduce its input pipeline.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualBranchModel,
    pub transform: Transform,
    pub spatial_stats: Option<BranchStats>,
    pub freq_stats: Option<BranchStats>,
}

fn mode_code(mode: StitchMode) -> u8 {
    match mode {
        StitchMode::RgbOnly => 0,
        StitchMode::FreqOnly => 1,
        StitchMode::NoStitch => 2,
        StitchMode::OneStitch => 3,
        StitchMode::AllStitches => 4,
    }
}

fn mode_from_code(code: u8) -> Option<StitchMode> {
    match code {
        0 => Some(StitchMode::RgbOnly),
        1 => Some(StitchMode::FreqOnly),
        2 => Some(StitchMode::NoStitch),
        3 => Some(StitchMode::OneStitch),
        4 => Some(StitchMode::AllStitches),
        _ => None,
    }
}

fn transform_code(t: Transform) -> u8 {
    match t {
        Transform::Dct => 0,
        Transform::FftAmplitude => 1,
        Transform::DwtHaar => 2,
    }
}

fn transform_from_code(code: u8) -> Option<Transform> {
    match code {
        0 => Some(Transform::Dct),
        1 => Some(Transform::FftAmplitude),
        2 => Some(Transform::DwtHaar),
        _ => None,
    }
}

fn push_block(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn stats_blocks(&self) -> Vec<Vec<f64>> {
        let mut blocks = Vec::new();
        if let Some(s) = &self.spatial_stats {
            blocks.push(s.mean.clone());
            blocks.push(s.std.clone());
        }
        if let Some(s) = &self.freq_stats {
            blocks.push(s.mean.clone());
            blocks.push(s.std.clone());
        }
        blocks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let model = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(mode_code(model.mode));
        out.push(transform_code(self.transform));
        out.extend_from_slice(&(model.input_size as u32).to_le_bytes());
        out.extend_from_slice(&model.seed.to_le_bytes());

        let stats_blocks = self.stats_blocks();
        let param_blocks = model.param_blocks();
        out.extend_from_slice(&((stats_blocks.len() + param_blocks.len()) as u32).to_le_bytes());
        for b in &stats_blocks {
            push_block(&mut out, b);
        }
        let flat = model.flatten_params();
        for b in &param_blocks {
            push_block(&mut out, &flat[b.start..b.start + b.len]);
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::BadCheckpoint { path: path.to_path_buf(), reason };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if bytes.len() < *pos + n {
                return Err(Error::BadCheckpoint {
                    path: path.to_path_buf(),
                    reason: "truncated".to_string(),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic (not an MDCS checkpoint)".to_string()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mode = mode_from_code(take(&mut pos, 1)?[0])
            .ok_or_else(|| bad("unknown mode tag".to_string()))?;
        let transform = transform_from_code(take(&mut pos, 1)?[0])
            .ok_or_else(|| bad("unknown transform tag".to_string()))?;
        let input_size = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let n_blocks = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, len * 8)?;
            blocks.push(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            );
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }

        let mut model = build_model(mode, input_size, seed)?;
        let expected_stats = 2 * (usize::from(mode.uses_spatial()) + usize::from(mode.uses_frequency()));
        let param_meta = model.param_blocks();
        if blocks.len() != expected_stats + param_meta.len() {
            return Err(bad(format!(
                "expected {} blocks, found {}",
                expected_stats + param_meta.len(),
                blocks.len()
            )));
        }
        let mut iter = blocks.into_iter();
        let mut read_stats = |branch: Branch| -> Result<BranchStats> {
            let mean = iter.next().unwrap();
            let std = iter.next().unwrap();
            if mean.len() != 3 || std.len() != 3 {
                return Err(Error::BadCheckpoint {
                    path: path.to_path_buf(),
                    reason: "normalization blocks must have 3 channels".to_string(),
                });
            }
            Ok(BranchStats { mean, std, branch })
        };
        let spatial_stats =
            if mode.uses_spatial() { Some(read_stats(Branch::Spatial)?) } else { None };
        let freq_stats =
            if mode.uses_frequency() { Some(read_stats(Branch::Frequency)?) } else { None };

        let mut flat = Vec::with_capacity(model.param_count());
        for meta in &param_meta {
            let block = iter.next().unwrap();
            if block.len() != meta.len {
                return Err(bad(format!(
                    "block '{}' has {} values, expected {}",
                    meta.name,
                    block.len(),
                    meta.len
                )));
            }
            flat.extend_from_slice(&block);
        }
        model.load_flat_params(&flat)?;
        Ok(Checkpoint { model, transform, spatial_stats, freq_stats })
    }
}
