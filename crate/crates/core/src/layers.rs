//! Pre-norm transformer building blocks.
//!
//! Everything here is composed from differentiable tensor primitives; the
//! fused candle kernels for layer norm and last-dim softmax have no backward
//! pass and are avoided.

use candle_core::{Tensor, D};
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

pub fn linear(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
    let w = pb.param("weight", &[out_dim, in_dim], Init::TruncNormal(INIT_STD))?;
    let b = if bias {
        Some(pb.param("bias", &[out_dim], Init::Zeros)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn linear_param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
    in_dim * out_dim + if bias { out_dim } else { 0 }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[dim], Init::Ones)?,
            bias: pb.param("bias", &[dim], Init::Zeros)?,
            eps: LN_EPS,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax along the last dimension, built from differentiable ops.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: linear(&mut pb.pp("qkv"), dim, 3 * dim, true)?,
            proj: linear(&mut pb.pp("proj"), dim, dim, true)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * self.scale)?;
        let att = softmax(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(&mut pb.pp("fc1"), dim, hidden, true)?,
            fc2: linear(&mut pb.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?)
    }
}

pub fn mlp_hidden(dim: usize, mlp_ratio: f64) -> usize {
    (dim as f64 * mlp_ratio).round() as usize
}

/// Pre-norm ViT block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim)?,
            attn: Attention::new(&mut pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim)?,
            mlp: Mlp::new(&mut pb.pp("mlp"), dim, mlp_hidden(dim, mlp_ratio))?,
        })
    }

    /// Closed-form parameter count of one block of width `dim`.
    pub fn param_count(dim: usize, mlp_ratio: f64) -> usize {
        let hidden = mlp_hidden(dim, mlp_ratio);
        2 * LayerNorm::param_count(dim)
            + linear_param_count(dim, 3 * dim, true)
            + linear_param_count(dim, dim, true)
            + linear_param_count(dim, hidden, true)
            + linear_param_count(hidden, dim, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

pub fn build_blocks(
    pb: &mut ParamBuilder,
    depth: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: f64,
) -> Result<Vec<Block>> {
    (0..depth)
        .map(|i| Block::new(&mut pb.pp(i), dim, heads, mlp_ratio))
        .collect()
}

pub fn run_blocks(blocks: &[Block], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}
