//! Projection heads with teacher centering and temperature sharpening.

use candle_core::{Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub prototypes: usize,
    pub temperature_student: f64,
    /// Final teacher temperature, reached after the warmup.
    pub temperature_teacher: f64,
    pub temperature_teacher_warmup_start: f64,
    pub temperature_teacher_warmup_steps: usize,
    pub center_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            bottleneck_dim: 64,
            prototypes: 256,
            temperature_student: 0.1,
            temperature_teacher: 0.07,
            temperature_teacher_warmup_start: 0.04,
            temperature_teacher_warmup_steps: 30,
            center_momentum: 0.9,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 || self.prototypes < 2 {
            return Err(Error::Config("head sizes must be positive, prototypes >= 2".into()));
        }
        let t_max = self.temperature_teacher.max(self.temperature_teacher_warmup_start);
        if !(self.temperature_teacher > 0.0 && self.temperature_teacher_warmup_start > 0.0) {
            return Err(Error::Config("teacher temperatures must be positive".into()));
        }
        if !(t_max < self.temperature_student) {
            return Err(Error::Config(format!(
                "teacher temperature {t_max} must be below student temperature {}",
                self.temperature_student
            )));
        }
        if !(self.center_momentum > 0.0 && self.center_momentum < 1.0) {
            return Err(Error::Config("center momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup from the start temperature to the final one.
    pub fn teacher_temperature(&self, step: usize) -> f64 {
        let w = self.temperature_teacher_warmup_steps;
        if step >= w || w == 0 {
            return self.temperature_teacher;
        }
        let t = step as f64 / w as f64;
        self.temperature_teacher_warmup_start + t * (self.temperature_teacher - self.temperature_teacher_warmup_start)
    }
}

/// `D -> hidden -> bottleneck -> L2 normalize -> prototypes`, the last layer
/// row-normalized so logits are cosine similarities.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
    prototypes: Tensor,
    pub temperature_student: f64,
    pub temperature_teacher: f64,
    /// Running mean of teacher logits, `[K]`.
    pub center: Tensor,
    pub center_momentum: f64,
}

impl ProjectionHead {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, cfg: &HeadConfig) -> Result<Self> {
        let bound = 1.0 / (cfg.bottleneck_dim as f64).sqrt();
        Ok(Self {
            fc1: linear(&mut pb.pp("fc1"), in_dim, cfg.hidden_dim, true)?,
            fc2: linear(&mut pb.pp("fc2"), cfg.hidden_dim, cfg.bottleneck_dim, true)?,
            prototypes: pb.param("prototypes", &[cfg.prototypes, cfg.bottleneck_dim], Init::Uniform(bound))?,
            temperature_student: cfg.temperature_student,
            temperature_teacher: cfg.temperature_teacher_warmup_start,
            center: Tensor::zeros(cfg.prototypes, pb.dtype(), &pb.device())?,
            center_momentum: cfg.center_momentum,
        })
    }

    pub fn prototypes(&self) -> usize {
        self.center.dims()[0]
    }

    /// Raw prototype logits `[.., K]`.
    pub fn logits(&self, y: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(y)?.gelu_erf()?;
        let z = l2_normalize(&self.fc2.forward(&h)?)?;
        let w = l2_normalize(&self.prototypes)?;
        Ok(z.broadcast_matmul(&w.t()?)?)
    }

    /// `center <- m * center + (1 - m) * mean(batch_logits)` over all leading
    /// dims.
    pub fn update_center(&mut self, batch_logits: &Tensor) -> Result<Tensor> {
        let k = self.prototypes();
        let flat = batch_logits.detach().reshape(((), k))?;
        let mean = flat.mean(0)?;
        let m = self.center_momentum;
        self.center = ((&self.center * m)? + (&mean * (1.0 - m))?)?;
        Ok(mean)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Prototype distributions.
#[derive(Debug, Clone)]
pub struct Projected {
    pub logits: Tensor,
    pub probs: Tensor,
    pub log_probs: Tensor,
}

impl Projected {
    /// Distribution from given logits at a temperature (no centering).
    pub fn from_logits(logits: &Tensor, temperature: f64) -> Result<Self> {
        let scaled = (logits / temperature)?;
        let log_probs = candle_nn::ops::log_softmax(&scaled, D::Minus1)?;
        Ok(Self {
            logits: logits.clone(),
            probs: log_probs.exp()?,
            log_probs,
        })
    }

    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        Ok(Self {
            logits: probs.log()?,
            probs: probs.clone(),
            log_probs: probs.log()?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.detach(),
            probs: self.probs.detach(),
            log_probs: self.log_probs.detach(),
        }
    }
}

/// Student: softmax at the student temperature. Teacher: subtract the running
/// center, softmax at the teacher temperature, and cut the graph.
pub fn project(y: &Tensor, head: &ProjectionHead, is_teacher: bool) -> Result<Projected> {
    let logits = head.logits(y)?;
    if is_teacher {
        let centered = logits.broadcast_sub(&head.center)?;
        let p = Projected::from_logits(&centered, head.temperature_teacher)?;
        Ok(Projected {
            logits,
            ..p
        }
        .detach())
    } else {
        Projected::from_logits(&logits, head.temperature_student)
    }
}
