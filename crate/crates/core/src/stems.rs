//! Per-channel instance normalization and grouped patch tokenization.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};
use crate::schema::{split_groups, GroupSchema};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub image_size: usize,
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.token_dim == 0 || self.image_size == 0 {
            return Err(Error::Config("stem sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch projection, bias, and positional table.
    pub fn param_count(&self) -> usize {
        let p2 = self.patch_size * self.patch_size;
        p2 * self.token_dim + self.token_dim + self.num_tokens() * self.token_dim
    }
}

/// Standardize every `(sample, channel)` plane to zero mean and unit
/// variance. Constant planes map to zeros.
pub fn instance_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    // rounding residue of a constant plane is not signal
    let varying = var.gt(&(mean.sqr()? * 1e-10)?)?.to_dtype(x.dtype())?;
    let out = centered
        .broadcast_mul(&varying)?
        .broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Split `[B, C, h, w]` into non-overlapping `p x p` patches:
/// `[B * C, gh * gw, p * p]`, row-major over the patch grid.
pub(crate) fn patchify(x: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let patches = x
        .reshape((b * c, gh, p, gw, p))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b * c, gh * gw, p * p))?;
    Ok((patches, gh, gw))
}

/// Resize a `[g*g, dim]` positional table to an `s x s` grid by block
/// averaging. `s` must divide `g`.
pub(crate) fn resize_positional(pos: &Tensor, grid: usize, target: usize) -> Result<Tensor> {
    if target == grid {
        return Ok(pos.clone());
    }
    if target == 0 || grid % target != 0 {
        return Err(Error::Shape(format!(
            "token grid {target} does not evenly divide positional grid {grid}"
        )));
    }
    let k = grid / target;
    let dim = pos.dims()[1];
    Ok(pos
        .reshape((target, k, target, k, dim))?
        .mean(3)?
        .mean(1)?
        .reshape((target * target, dim))?)
}

/// Convolutional stem shared by every channel of one group.
///
/// A single strided convolution with kernel = stride = patch size, one input
/// channel, `token_dim` outputs, plus a learned positional table added to
/// every channel's token sequence.
#[derive(Debug, Clone)]
pub struct GroupStem {
    /// `[d, p * p]`
    weight: Tensor,
    /// `[d]`
    bias: Tensor,
    /// `[N, d]`
    pos: Tensor,
    cfg: StemConfig,
}

impl GroupStem {
    pub fn new(pb: &mut ParamBuilder, cfg: StemConfig) -> Result<Self> {
        cfg.validate()?;
        let p2 = cfg.patch_size * cfg.patch_size;
        let bound = 1.0 / (p2 as f64).sqrt();
        Ok(Self {
            weight: pb.param("proj.weight", &[cfg.token_dim, p2], Init::Uniform(bound))?,
            bias: pb.param("proj.bias", &[cfg.token_dim], Init::Zeros)?,
            pos: pb.param("pos_embed", &[cfg.num_tokens(), cfg.token_dim], Init::TruncNormal(0.02))?,
            cfg,
        })
    }

    pub fn config(&self) -> &StemConfig {
        &self.cfg
    }

    /// Patch embeddings without positional terms: `[B, C_g, n, d]`.
    pub fn embed_patches(&self, x_group: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x_group.dims4()?;
        let (patches, gh, gw) = patchify(x_group, self.cfg.patch_size)?;
        if gh != gw {
            return Err(Error::Shape(format!("non-square token grid {gh}x{gw}")));
        }
        let tokens = patches
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        Ok(tokens.reshape((b, c, gh * gw, self.cfg.token_dim))?)
    }

    /// Positional table for `n` tokens (square grid).
    pub fn positional(&self, n: usize) -> Result<Tensor> {
        let target = (n as f64).sqrt().round() as usize;
        if target * target != n {
            return Err(Error::Shape(format!("{n} tokens do not form a square grid")));
        }
        resize_positional(&self.pos, self.cfg.grid(), target)
    }

    pub fn add_positional(&self, tokens: &Tensor) -> Result<Tensor> {
        let n = tokens.dims()[2];
        Ok(tokens.broadcast_add(&self.positional(n)?)?)
    }
}

/// `[B, C_g, h, w]` -> `[B, C_g, N, d]`: the group stem applied to every
/// channel independently, plus the group's positional table.
pub fn tokenize_group(x_group: &Tensor, stem: &GroupStem, cfg: &StemConfig) -> Result<Tensor> {
    if stem.config() != cfg {
        return Err(Error::Shape(format!(
            "stem built for {:?}, called with {:?}",
            stem.config(),
            cfg
        )));
    }
    let (_, _, h, w) = x_group.dims4()?;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "input {h}x{w}, stem configured for {0}x{0}",
            cfg.image_size
        )));
    }
    stem.add_positional(&stem.embed_patches(x_group)?)
}

/// Context and concept stems.
#[derive(Debug, Clone)]
pub struct GroupedStems {
    pub context: GroupStem,
    pub concept: GroupStem,
}

impl GroupedStems {
    pub fn new(pb: &mut ParamBuilder, cfg: StemConfig) -> Result<Self> {
        Ok(Self {
            context: GroupStem::new(&mut pb.pp("context"), cfg)?,
            concept: GroupStem::new(&mut pb.pp("concept"), cfg)?,
        })
    }
}

/// Grouped stem without branches: normalize, tokenize each group, mean over
/// the group's channels, concatenate to `[B, N, 2d]`.
pub fn naive_grouped_stem(
    x: &Tensor,
    schema: &GroupSchema,
    stems: &GroupedStems,
) -> Result<Tensor> {
    let g = split_groups(x, schema)?;
    let cfg = *stems.context.config();
    let ctx = tokenize_group(&instance_normalize(&g.context, INSTANCE_NORM_EPS)?, &stems.context, &cfg)?;
    let con = tokenize_group(&instance_normalize(&g.concept, INSTANCE_NORM_EPS)?, &stems.concept, &cfg)?;
    Ok(Tensor::cat(&[ctx.mean(1)?, con.mean(1)?], D::Minus1)?)
}
