//! Context-channel dropping and patch masking for the student network.

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::index_tensor;

/// How many context channels the student (and optionally the teacher) loses
/// per training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropPolicy {
    None,
    FixedStudent { c: usize },
    UniformStudent { max_c: usize },
    StudentAndTeacher { c: usize },
}

impl DropPolicy {
    pub fn validate(&self, c1: usize) -> Result<()> {
        let c = match *self {
            DropPolicy::None => return Ok(()),
            DropPolicy::FixedStudent { c } | DropPolicy::StudentAndTeacher { c } => c,
            DropPolicy::UniformStudent { max_c } => max_c,
        };
        if c >= c1 {
            return Err(Error::Config(format!(
                "dropping {c} of {c1} context channels leaves none"
            )));
        }
        Ok(())
    }

    pub fn drops_teacher(&self) -> bool {
        matches!(self, DropPolicy::StudentAndTeacher { .. })
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, DropPolicy::None)
    }
}

pub fn sample_drop_count<R: Rng>(policy: &DropPolicy, c1: usize, rng: &mut R) -> Result<usize> {
    policy.validate(c1)?;
    Ok(match *policy {
        DropPolicy::None => 0,
        DropPolicy::FixedStudent { c } | DropPolicy::StudentAndTeacher { c } => c,
        DropPolicy::UniformStudent { max_c } => rng.random_range(0..=max_c),
    })
}

/// Uniformly random set of `c` context positions out of `c1`, sorted.
pub fn choose_dropped<R: Rng>(c1: usize, c: usize, rng: &mut R) -> Result<Vec<usize>> {
    if c >= c1 {
        return Err(Error::Config(format!(
            "cannot drop {c} of {c1} context channels"
        )));
    }
    let mut v = sample(rng, c1, c).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Remove `c` random channels from `[B, C1, h, w]`, the same ones for every
/// sample. Returns the reduced stack and the dropped positions.
pub fn drop_channels<R: Rng>(x_c1: &Tensor, c: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let c1 = x_c1.dims4()?.1;
    let dropped = choose_dropped(c1, c, rng)?;
    let keep: Vec<usize> = (0..c1).filter(|i| !dropped.contains(i)).collect();
    let out = x_c1.index_select(&index_tensor(&keep, x_c1.device())?, 1)?;
    Ok((out, dropped))
}

/// Per-sample boolean patch masks, identical across the channels of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    /// `[B][N]`, true where the patch is masked.
    pub mask: Vec<Vec<bool>>,
}

impl PatchMask {
    pub fn none(batch: usize, n_tokens: usize) -> Self {
        Self {
            mask: vec![vec![false; n_tokens]; batch],
        }
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let b = self.mask.len();
        let n = self.mask.first().map_or(0, Vec::len);
        let flat: Vec<f32> = self
            .mask
            .iter()
            .flatten()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(flat, (b, n), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Replace masked positions of `[B, C, N, d]` tokens with `mask_token`.
    pub fn apply(&self, tokens: &Tensor, mask_token: &Tensor) -> Result<Tensor> {
        let (b, _, n, _) = tokens.dims4()?;
        let m = self.to_tensor(tokens.dtype())?.reshape((b, 1, n, 1))?;
        Ok(tokens
            .broadcast_mul(&m.affine(-1.0, 1.0)?)?
            .broadcast_add(&m.broadcast_mul(mask_token)?)?)
    }
}

/// Number of masked positions for a given ratio: `floor(N * ratio)`.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    ((n_tokens as f64) * ratio).floor() as usize
}

/// Draw one ratio per sample uniformly from `[lo, hi]` and mask
/// `floor(N * ratio)` uniformly chosen positions.
pub fn patch_mask<R: Rng>(batch: usize, n_tokens: usize, ratio_range: (f64, f64), rng: &mut R) -> Result<PatchMask> {
    let (lo, hi) = ratio_range;
    if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
        return Err(Error::Config(format!(
            "mask ratio range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"
        )));
    }
    let mask = (0..batch)
        .map(|_| {
            let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let k = masked_count(n_tokens, ratio);
            let mut row = vec![false; n_tokens];
            for i in sample(rng, n_tokens, k) {
                row[i] = true;
            }
            row
        })
        .collect();
    Ok(PatchMask { mask })
}
