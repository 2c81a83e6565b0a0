//! The context-concept encoder and the single-stem ViT baseline.
//!
//! ```text
//! x ──split──┬─ context ─ IN ─ stem_ctx ─ branch_ctx ─┐
//!            └─ concept ─ IN ─ stem_con ─ branch_con ─┴─ concat ─ LN ─ [cls; ·] ─ shared blocks ─ LN ─ y
//! ```
//!
//! Branches run at half width `d = D/2`. With [`Aggregation::Pre`] each group
//! is mean-pooled over its channels before the branch; with
//! [`Aggregation::Post`] the branch runs on every channel and the outputs are
//! pooled afterwards. Both variants are invariant to the order of channels
//! inside a group and accept any number of channels per group.

use candle_core::{IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{build_blocks, run_blocks, Block, LayerNorm};
use crate::params::{Init, ParamBuilder};
use crate::schema::{merge_groups, split_groups, GroupSchema, GroupedBatch};
use crate::stems::{instance_normalize, patchify, resize_positional, GroupStem, GroupedStems, StemConfig, INSTANCE_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Pre,
    Post,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Full width `D`; branches run at `D / 2`.
    pub embed_dim: usize,
    pub branch_depth: usize,
    pub shared_depth: usize,
    /// Heads at full width. Branches use half as many.
    pub heads: usize,
    pub aggregation: Aggregation,
    pub mlp_ratio: f64,
    #[serde(default)]
    pub flip_groups: bool,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_true")]
    pub instance_norm: bool,
}

impl EncoderConfig {
    pub fn branch_dim(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn branch_heads(&self) -> usize {
        (self.heads / 2).max(1)
    }

    pub fn stem(&self) -> StemConfig {
        StemConfig {
            patch_size: self.patch_size,
            token_dim: self.branch_dim(),
            image_size: self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be even so the branch width is exactly D/2",
                self.embed_dim
            )));
        }
        if self.shared_depth == 0 {
            return Err(Error::Config("shared_depth must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.branch_dim() % self.branch_heads() != 0 {
            return Err(Error::Config(format!(
                "branch width {} not divisible by {} branch heads",
                self.branch_dim(),
                self.branch_heads()
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        self.stem().validate()
    }

    /// ViT-S/16 with two layers per branch and ten shared layers.
    pub fn vit_small() -> Self {
        Self {
            embed_dim: 384,
            branch_depth: 2,
            shared_depth: 10,
            heads: 6,
            aggregation: Aggregation::Post,
            mlp_ratio: 4.0,
            flip_groups: false,
            patch_size: 16,
            image_size: 224,
            instance_norm: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            branch_depth: 1,
            shared_depth: 2,
            heads: 4,
            aggregation: Aggregation::Pre,
            mlp_ratio: 4.0,
            flip_groups: false,
            patch_size: 16,
            image_size: 32,
            instance_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    #[serde(default)]
    pub instance_norm: bool,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.in_channels == 0 {
            return Err(Error::Config("ViT sizes must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        StemConfig {
            patch_size: self.patch_size,
            token_dim: self.embed_dim,
            image_size: self.image_size,
        }
        .validate()
    }

    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// The baseline a CCE config is compared against.
    pub fn baseline_for(cfg: &EncoderConfig, in_channels: usize, depth: usize) -> Self {
        Self {
            embed_dim: cfg.embed_dim,
            depth,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            patch_size: cfg.patch_size,
            image_size: cfg.image_size,
            in_channels,
            instance_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Vit(VitConfig),
    Cce(EncoderConfig),
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.embed_dim,
            ModelConfig::Cce(c) => c.embed_dim,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.image_size,
            ModelConfig::Cce(c) => c.image_size,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.patch_size,
            ModelConfig::Cce(c) => c.patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Vit(c) => c.validate(),
            ModelConfig::Cce(c) => c.validate(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => vit_parameter_count(c),
            ModelConfig::Cce(c) => count_parameters(c),
        }
    }
}

/// Exact encoder parameter count: stems, positional tables, branches, fusion
/// norm, classification token, shared blocks, final norm. Projection heads
/// and mask tokens are not counted.
pub fn count_parameters(cfg: &EncoderConfig) -> usize {
    let d = cfg.branch_dim();
    2 * cfg.stem().param_count()
        + 2 * cfg.branch_depth * Block::param_count(d, cfg.mlp_ratio)
        + LayerNorm::param_count(cfg.embed_dim)
        + cfg.embed_dim
        + cfg.shared_depth * Block::param_count(cfg.embed_dim, cfg.mlp_ratio)
        + LayerNorm::param_count(cfg.embed_dim)
}

pub fn vit_parameter_count(cfg: &VitConfig) -> usize {
    let p2 = cfg.patch_size * cfg.patch_size;
    let dim = cfg.embed_dim;
    cfg.in_channels * p2 * dim
        + dim
        + (cfg.num_tokens() + 1) * dim
        + dim
        + cfg.depth * Block::param_count(dim, cfg.mlp_ratio)
        + LayerNorm::param_count(dim)
}

/// Parameters outside the transformer blocks, CCE minus baseline.
pub fn stem_delta(cfg: &EncoderConfig, baseline: &VitConfig) -> i64 {
    let cce = count_parameters(&EncoderConfig {
        branch_depth: 0,
        shared_depth: 0,
        ..cfg.clone()
    }) as i64;
    let vit = vit_parameter_count(&VitConfig {
        depth: 0,
        ..baseline.clone()
    }) as i64;
    cce - vit
}

/// Largest shared depth whose CCE total does not exceed the baseline total.
/// Never below one.
pub fn normalized_shared_depth(baseline: &VitConfig, cfg: &EncoderConfig) -> usize {
    let budget = vit_parameter_count(baseline);
    let mut depth = 1;
    while count_parameters(&EncoderConfig {
        shared_depth: depth + 1,
        ..cfg.clone()
    }) <= budget
    {
        depth += 1;
    }
    depth
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// `[B, N]` in the model dtype, 1 where a patch is replaced by the mask
    /// token.
    pub mask: Option<Tensor>,
    /// Route context tokens through the concept branch and vice versa.
    pub flip: bool,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, D]`
    pub cls: Tensor,
    /// `[B, N, D]`
    pub patches: Tensor,
    /// Pooled context-branch output `[B, N, d]` (CCE only).
    pub context_branch: Option<Tensor>,
}

fn apply_mask(tokens: &Tensor, mask: &Tensor, mask_token: &Tensor) -> Result<Tensor> {
    // tokens [B, C, N, d], mask [B, N]
    let (b, _, n, _) = tokens.dims4()?;
    let m = mask.reshape((b, 1, n, 1))?;
    let keep = m.affine(-1.0, 1.0)?;
    Ok(tokens
        .broadcast_mul(&keep)?
        .broadcast_add(&m.broadcast_mul(mask_token)?)?)
}

/// Mean over channels, then the branch layers.
pub fn branch_encode_pre(tokens: &Tensor, branch: &[Block]) -> Result<Tensor> {
    run_blocks(branch, &tokens.mean(1)?)
}

/// Branch layers on every channel independently, then mean over channels.
pub fn branch_encode_post(tokens: &Tensor, branch: &[Block]) -> Result<Tensor> {
    let (b, c, n, d) = tokens.dims4()?;
    let out = run_blocks(branch, &tokens.reshape((b * c, n, d))?)?;
    Ok(out.reshape((b, c, n, d))?.mean(1)?)
}

/// Concatenate along features, layer-normalize over the joint `2d` vector,
/// prepend the classification token.
pub fn fuse(ctx: &Tensor, con: &Tensor, cls_token: &Tensor, norm: &LayerNorm) -> Result<Tensor> {
    let (b, n, _) = ctx.dims3()?;
    let (b2, n2, _) = con.dims3()?;
    if (b, n) != (b2, n2) {
        return Err(Error::Shape(format!(
            "context branch [{b}, {n}, _] vs concept branch [{b2}, {n2}, _]"
        )));
    }
    let x = norm.forward(&Tensor::cat(&[ctx, con], D::Minus1)?)?;
    let dim = x.dims()[2];
    let cls = cls_token.reshape((1, 1, dim))?.broadcast_as((b, 1, dim))?;
    Ok(Tensor::cat(&[&cls, &x], 1)?)
}

#[derive(Debug, Clone)]
pub struct CceEncoder {
    cfg: EncoderConfig,
    stems: GroupedStems,
    context_branch: Vec<Block>,
    concept_branch: Vec<Block>,
    fusion_norm: LayerNorm,
    cls_token: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    mask_context: Tensor,
    mask_concept: Tensor,
}

impl CceEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.branch_dim();
        let dim = cfg.embed_dim;
        Ok(Self {
            stems: GroupedStems::new(&mut pb.pp("stem"), cfg.stem())?,
            context_branch: build_blocks(&mut pb.pp("branch.context"), cfg.branch_depth, d, cfg.branch_heads(), cfg.mlp_ratio)?,
            concept_branch: build_blocks(&mut pb.pp("branch.concept"), cfg.branch_depth, d, cfg.branch_heads(), cfg.mlp_ratio)?,
            fusion_norm: LayerNorm::new(&mut pb.pp("fusion_norm"), dim)?,
            cls_token: pb.param("cls_token", &[dim], Init::TruncNormal(0.02))?,
            blocks: build_blocks(&mut pb.pp("blocks"), cfg.shared_depth, dim, cfg.heads, cfg.mlp_ratio)?,
            norm: LayerNorm::new(&mut pb.pp("norm"), dim)?,
            mask_context: pb.param("mask_token.context", &[d], Init::Zeros)?,
            mask_concept: pb.param("mask_token.concept", &[d], Init::Zeros)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stems(&self) -> &GroupedStems {
        &self.stems
    }

    fn group_tokens(&self, x: &Tensor, stem: &GroupStem, mask: Option<&Tensor>, mask_token: &Tensor) -> Result<Tensor> {
        let x = if self.cfg.instance_norm {
            instance_normalize(x, INSTANCE_NORM_EPS)?
        } else {
            x.clone()
        };
        let mut t = stem.embed_patches(&x)?;
        if let Some(m) = mask {
            t = apply_mask(&t, m, mask_token)?;
        }
        stem.add_positional(&t)
    }

    fn branch(&self, tokens: &Tensor, blocks: &[Block]) -> Result<Tensor> {
        match self.cfg.aggregation {
            Aggregation::Pre => branch_encode_pre(tokens, blocks),
            Aggregation::Post => branch_encode_post(tokens, blocks),
        }
    }

    /// Stems and branches only: pooled `[B, N, d]` for each group.
    pub fn encode_groups(&self, batch: &GroupedBatch, opts: &ForwardOptions) -> Result<(Tensor, Tensor)> {
        let tc = self.group_tokens(&batch.context, &self.stems.context, opts.mask.as_ref(), &self.mask_context)?;
        let tk = self.group_tokens(&batch.concept, &self.stems.concept, opts.mask.as_ref(), &self.mask_concept)?;
        let flip = opts.flip || self.cfg.flip_groups;
        let (for_ctx, for_con) = if flip {
            (&self.concept_branch, &self.context_branch)
        } else {
            (&self.context_branch, &self.concept_branch)
        };
        Ok((self.branch(&tc, for_ctx)?, self.branch(&tk, for_con)?))
    }

    pub fn forward_grouped(&self, batch: &GroupedBatch, opts: &ForwardOptions) -> Result<EncoderOutput> {
        let (hc, hk) = self.encode_groups(batch, opts)?;
        let x = fuse(&hc, &hk, &self.cls_token, &self.fusion_norm)?;
        let y = self.norm.forward(&run_blocks(&self.blocks, &x)?)?;
        let n = y.dims()[1] - 1;
        Ok(EncoderOutput {
            cls: y.i((.., 0))?,
            patches: y.narrow(1, 1, n)?,
            context_branch: Some(hc),
        })
    }

    pub fn forward(&self, x: &Tensor, schema: &GroupSchema, opts: &ForwardOptions) -> Result<EncoderOutput> {
        self.forward_grouped(&split_groups(x, schema)?, opts)
    }
}

/// Standard ViT with one convolutional stem over all channels.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    cfg: VitConfig,
    proj_weight: Tensor,
    proj_bias: Tensor,
    pos: Tensor,
    cls_token: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    mask_token: Tensor,
}

impl VitEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.embed_dim;
        let fan_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        Ok(Self {
            proj_weight: pb.param("patch_embed.weight", &[dim, fan_in], Init::Uniform(1.0 / (fan_in as f64).sqrt()))?,
            proj_bias: pb.param("patch_embed.bias", &[dim], Init::Zeros)?,
            pos: pb.param("pos_embed", &[cfg.num_tokens() + 1, dim], Init::TruncNormal(0.02))?,
            cls_token: pb.param("cls_token", &[dim], Init::TruncNormal(0.02))?,
            blocks: build_blocks(&mut pb.pp("blocks"), cfg.depth, dim, cfg.heads, cfg.mlp_ratio)?,
            norm: LayerNorm::new(&mut pb.pp("norm"), dim)?,
            mask_token: pb.param("mask_token", &[dim], Init::Zeros)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// `x`: `[B, C, h, w]` with `C == in_channels`.
    pub fn forward(&self, x: &Tensor, opts: &ForwardOptions) -> Result<EncoderOutput> {
        if opts.flip {
            return Err(Error::Config("group flipping needs a grouped encoder".into()));
        }
        let (b, c, _, _) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "ViT built for {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let x = if self.cfg.instance_norm {
            instance_normalize(x, INSTANCE_NORM_EPS)?
        } else {
            x.clone()
        };
        let p = self.cfg.patch_size;
        let (patches, gh, gw) = patchify(&x, p)?;
        if gh != gw {
            return Err(Error::Shape(format!("non-square token grid {gh}x{gw}")));
        }
        let n = gh * gw;
        let patches = patches
            .reshape((b, c, n, p * p))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, n, c * p * p))?;
        let mut t = patches
            .broadcast_matmul(&self.proj_weight.t()?)?
            .broadcast_add(&self.proj_bias)?;
        if let Some(m) = &opts.mask {
            let m = m.reshape((b, n, 1))?;
            t = t
                .broadcast_mul(&m.affine(-1.0, 1.0)?)?
                .broadcast_add(&m.broadcast_mul(&self.mask_token)?)?;
        }
        let grid = self.cfg.image_size / p;
        let dim = self.cfg.embed_dim;
        let patch_pos = resize_positional(&self.pos.narrow(0, 1, grid * grid)?, grid, gh)?;
        let t = t.broadcast_add(&patch_pos)?;
        let cls = (&self.cls_token + self.pos.i(0)?)?
            .reshape((1, 1, dim))?
            .broadcast_as((b, 1, dim))?;
        let x = Tensor::cat(&[&cls, &t], 1)?;
        let y = self.norm.forward(&run_blocks(&self.blocks, &x)?)?;
        Ok(EncoderOutput {
            cls: y.i((.., 0))?,
            patches: y.narrow(1, 1, n)?,
            context_branch: None,
        })
    }
}

/// Either encoder behind one grouped-input interface.
#[derive(Debug, Clone)]
pub enum Backbone {
    Vit { encoder: VitEncoder, schema: GroupSchema },
    Cce(CceEncoder),
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, schema: &GroupSchema) -> Result<Self> {
        match cfg {
            ModelConfig::Vit(c) => {
                if c.in_channels != schema.n_channels() {
                    return Err(Error::Config(format!(
                        "ViT in_channels {} but schema has {} channels",
                        c.in_channels,
                        schema.n_channels()
                    )));
                }
                Ok(Backbone::Vit {
                    encoder: VitEncoder::new(pb, c)?,
                    schema: schema.clone(),
                })
            }
            ModelConfig::Cce(c) => Ok(Backbone::Cce(CceEncoder::new(pb, c)?)),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Backbone::Vit { encoder, .. } => encoder.config().embed_dim,
            Backbone::Cce(e) => e.config().embed_dim,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            Backbone::Vit { encoder, .. } => encoder.config().patch_size,
            Backbone::Cce(e) => e.config().patch_size,
        }
    }

    pub fn as_cce(&self) -> Option<&CceEncoder> {
        match self {
            Backbone::Cce(e) => Some(e),
            Backbone::Vit { .. } => None,
        }
    }

    /// Whether the encoder accepts batches with a reduced context group.
    pub fn channel_adaptive(&self) -> bool {
        matches!(self, Backbone::Cce(_))
    }

    pub fn forward(&self, batch: &GroupedBatch, opts: &ForwardOptions) -> Result<EncoderOutput> {
        match self {
            Backbone::Vit { encoder, schema } => encoder.forward(&merge_groups(batch, schema)?, opts),
            Backbone::Cce(e) => e.forward_grouped(batch, opts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::schema::presets;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn toy(agg: Aggregation) -> EncoderConfig {
        EncoderConfig {
            aggregation: agg,
            ..EncoderConfig::toy()
        }
    }

    fn build(cfg: &EncoderConfig, dtype: DType, seed: u64) -> (ParamStore, CceEncoder) {
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = CceEncoder::new(&mut store.builder(&mut rng), cfg).unwrap();
        (store, enc)
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn toy_shapes() {
        let (_, enc) = build(&EncoderConfig::toy(), DType::F32, 0);
        let out = enc
            .forward(&rand_tensor(&[2, 4, 32, 32], 1, DType::F32), &presets::hpa(), &ForwardOptions::default())
            .unwrap();
        assert_eq!(out.cls.dims(), &[2, 64]);
        assert_eq!(out.patches.dims(), &[2, 4, 64]);
        assert_eq!(out.context_branch.unwrap().dims(), &[2, 4, 32]);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::toy();
        c.embed_dim = 63;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.shared_depth = 0;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::vit_small().validate().is_ok());
    }

    #[test]
    fn empty_branch_is_pooling() {
        let t = rand_tensor(&[2, 3, 4, 8], 0, DType::F64);
        let out = branch_encode_pre(&t, &[]).unwrap();
        assert!(max_abs(&out, &t.mean(1).unwrap()) == 0.0);
    }

    #[test]
    fn singleton_group_pre_equals_post() {
        let cfg = toy(Aggregation::Pre);
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks = build_blocks(&mut store.builder(&mut rng), 2, 32, 2, cfg.mlp_ratio).unwrap();
        let t = rand_tensor(&[2, 1, 4, 32], 1, DType::F64);
        let pre = branch_encode_pre(&t, &blocks).unwrap();
        let post = branch_encode_post(&t, &blocks).unwrap();
        assert!(max_abs(&pre, &post) <= 1e-12);
    }

    #[test]
    fn duplicated_channels_match_single_channel_pre() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks = build_blocks(&mut store.builder(&mut rng), 1, 16, 2, 4.0).unwrap();
        let one = rand_tensor(&[1, 1, 4, 16], 7, DType::F64);
        let two = Tensor::cat(&[&one, &one], 1).unwrap();
        let a = branch_encode_pre(&one, &blocks).unwrap();
        let b = branch_encode_pre(&two, &blocks).unwrap();
        assert!(max_abs(&a, &b) <= 1e-12);
    }

    #[test]
    fn post_differs_from_pre_for_distinct_channels() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blocks = build_blocks(&mut store.builder(&mut rng), 1, 16, 2, 4.0).unwrap();
        let t = (rand_tensor(&[1, 2, 4, 16], 8, DType::F64) * 3.0).unwrap();
        let pre = branch_encode_pre(&t, &blocks).unwrap();
        let post = branch_encode_post(&t, &blocks).unwrap();
        assert!(max_abs(&pre, &post) > 1e-6);
    }

    #[test]
    fn fuse_shapes_and_zero_input() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pb = store.builder(&mut rng);
        let norm = LayerNorm::new(&mut pb.pp("n"), 64).unwrap();
        let cls = pb.param("cls", &[64], Init::TruncNormal(0.02)).unwrap();
        store.get("n.bias").unwrap().set(&rand_tensor(&[64], 2, DType::F64)).unwrap();
        let zeros = Tensor::zeros((2, 4, 32), DType::F64, &Device::Cpu).unwrap();
        let fused = fuse(&zeros, &zeros, &cls, &norm).unwrap();
        assert_eq!(fused.dims(), &[2, 5, 64]);
        let bias = store.get("n.bias").unwrap().as_tensor().clone();
        for pos in 1..5 {
            assert!(max_abs(&fused.i((1, pos)).unwrap(), &bias) < 1e-12);
        }
        let shorter = Tensor::zeros((2, 3, 32), DType::F64, &Device::Cpu).unwrap();
        assert!(fuse(&zeros, &shorter, &cls, &norm).is_err());
    }

    #[test]
    fn fuse_argument_swap_swaps_halves() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pb = store.builder(&mut rng);
        let norm = LayerNorm::new(&mut pb.pp("n"), 16).unwrap();
        let cls = pb.param("cls", &[16], Init::TruncNormal(0.02)).unwrap();
        let a = rand_tensor(&[2, 4, 8], 1, DType::F64);
        let b = rand_tensor(&[2, 4, 8], 2, DType::F64);
        let ab = fuse(&a, &b, &cls, &norm).unwrap().narrow(1, 1, 4).unwrap();
        let ba = fuse(&b, &a, &cls, &norm).unwrap().narrow(1, 1, 4).unwrap();
        assert!(max_abs(&ab.narrow(2, 0, 8).unwrap(), &ba.narrow(2, 8, 8).unwrap()) < 1e-12);
        assert!(max_abs(&ab.narrow(2, 8, 8).unwrap(), &ba.narrow(2, 0, 8).unwrap()) < 1e-12);
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for cfg in [EncoderConfig::toy(), toy(Aggregation::Post), EncoderConfig { branch_depth: 0, ..EncoderConfig::toy() }] {
            let (store, _) = build(&cfg, DType::F32, 0);
            assert_eq!(store.count_where(|n| !n.starts_with("mask_token")), count_parameters(&cfg));
        }
        let vit = VitConfig::baseline_for(&EncoderConfig::toy(), 4, 3);
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        VitEncoder::new(&mut store.builder(&mut rng), &vit).unwrap();
        assert_eq!(store.count_where(|n| !n.starts_with("mask_token")), vit_parameter_count(&vit));
    }

    #[test]
    fn degenerate_branchless_count_is_baseline_plus_stem_delta() {
        let cfg = EncoderConfig { branch_depth: 0, shared_depth: 12, ..EncoderConfig::vit_small() };
        let vit = VitConfig::baseline_for(&cfg, 4, 12);
        assert_eq!(count_parameters(&cfg) as i64, vit_parameter_count(&vit) as i64 + stem_delta(&cfg, &vit));
    }

    #[test]
    fn flip_changes_output_without_new_parameters() {
        let cfg = toy(Aggregation::Post);
        let (store, enc) = build(&cfg, DType::F32, 9);
        let n_before = store.len();
        let x = rand_tensor(&[2, 4, 32, 32], 3, DType::F32);
        let a = enc.forward(&x, &presets::hpa(), &ForwardOptions::default()).unwrap();
        let b = enc
            .forward(&x, &presets::hpa(), &ForwardOptions { flip: true, ..Default::default() })
            .unwrap();
        assert!(max_abs(&a.cls, &b.cls) > 0.0);
        assert_eq!(store.len(), n_before);
    }

    #[test]
    fn mask_replaces_patch_tokens() {
        let (store, enc) = build(&EncoderConfig::toy(), DType::F64, 2);
        store.get("mask_token.context").unwrap().set(&rand_tensor(&[32], 4, DType::F64)).unwrap();
        let schema = presets::hpa();
        let x = rand_tensor(&[1, 4, 32, 32], 3, DType::F64);
        let none = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        let some = Tensor::new(&[[0f64, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let base = enc.forward(&x, &schema, &ForwardOptions::default()).unwrap();
        let zero_mask = enc.forward(&x, &schema, &ForwardOptions { mask: Some(none), flip: false }).unwrap();
        let masked = enc.forward(&x, &schema, &ForwardOptions { mask: Some(some), flip: false }).unwrap();
        assert!(max_abs(&base.cls, &zero_mask.cls) < 1e-12);
        assert!(max_abs(&base.cls, &masked.cls) > 1e-6);
    }

    #[test]
    fn vit_backbone_runs_on_grouped_batches() {
        let schema = presets::hpa();
        let cfg = ModelConfig::Vit(VitConfig::baseline_for(&EncoderConfig::toy(), 4, 2));
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store.builder(&mut rng), &cfg, &schema).unwrap();
        let g = split_groups(&rand_tensor(&[2, 4, 32, 32], 1, DType::F32), &schema).unwrap();
        let out = bb.forward(&g, &ForwardOptions::default()).unwrap();
        assert_eq!(out.cls.dims(), &[2, 64]);
        assert!(bb.forward(&g.drop_context(&[0]).unwrap(), &ForwardOptions::default()).is_err());
        // 16x16 crops use a block-averaged positional table
        let small = split_groups(&rand_tensor(&[2, 4, 16, 16], 1, DType::F32), &schema).unwrap();
        assert!(bb.forward(&small, &ForwardOptions::default()).is_ok());
    }
}
