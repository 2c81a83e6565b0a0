//! Student/teacher state, EMA updates, schedules and the training step.

use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::channel_drop::{DropPolicy, PatchMask};
use super::heads::{project, HeadConfig, ProjectionHead, Projected};
use super::loss::{antibody_contrastive_loss, cls_distill_loss, patch_distill_loss};
use super::views::{make_views, CropConfig, ViewSet};
use crate::dataset::Dataset;
use crate::encoder::{Backbone, EncoderOutput, ForwardOptions, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schema::{GroupSchema, GroupedBatch};

/// Backbone plus the two projection heads.
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub cls_head: ProjectionHead,
    pub patch_head: ProjectionHead,
}

impl Network {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, model: &ModelConfig, schema: &GroupSchema, head: &HeadConfig) -> Result<Self> {
        let mut pb = store.builder(rng);
        let backbone = Backbone::new(&mut pb.pp("backbone"), model, schema)?;
        let dim = backbone.embed_dim();
        Ok(Self {
            backbone,
            cls_head: ProjectionHead::new(&mut pb.pp("cls_head"), dim, head)?,
            patch_head: ProjectionHead::new(&mut pb.pp("patch_head"), dim, head)?,
        })
    }
}

#[derive(Debug)]
pub struct DistillationState {
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub schema: GroupSchema,
    pub student_params: ParamStore,
    pub teacher_params: ParamStore,
    pub student: Network,
    pub teacher: Network,
    pub ema_momentum: f64,
    pub step: usize,
}

impl DistillationState {
    /// Fresh student from `seed`; the teacher starts as an exact copy.
    pub fn new(model: &ModelConfig, schema: &GroupSchema, head: &HeadConfig, dtype: DType, seed: u64) -> Result<Self> {
        model.validate()?;
        head.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut student_params = ParamStore::new(dtype);
        let student = Network::new(&mut student_params, &mut rng, model, schema, head)?;
        Self::with_student(model, schema, head, student_params, student)
    }

    /// State around an existing student parameter set (e.g. a checkpoint).
    pub fn from_params(model: &ModelConfig, schema: &GroupSchema, head: &HeadConfig, mut student_params: ParamStore) -> Result<Self> {
        let before = student_params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let student = Network::new(&mut student_params, &mut rng, model, schema, head)?;
        if student_params.len() != before {
            return Err(Error::Checkpoint(format!(
                "parameter set is missing {} tensors of the configured model",
                student_params.len() - before
            )));
        }
        Self::with_student(model, schema, head, student_params, student)
    }

    fn with_student(model: &ModelConfig, schema: &GroupSchema, head: &HeadConfig, student_params: ParamStore, student: Network) -> Result<Self> {
        let mut teacher_params = student_params.deep_copy()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = Network::new(&mut teacher_params, &mut rng, model, schema, head)?;
        Ok(Self {
            model: model.clone(),
            head: head.clone(),
            schema: schema.clone(),
            student_params,
            teacher_params,
            student,
            teacher,
            ema_momentum: 0.996,
            step: 0,
        })
    }
}

/// `t <- m * t + (1 - m) * s` for every teacher parameter.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (name, t) in teacher.iter() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::Shape(format!("student lacks parameter `{name}`")))?;
        if s.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: teacher {:?}, student {:?}",
                t.dims(),
                s.dims()
            )));
        }
        let next = ((t.as_tensor() * m)? + (s.as_tensor() * (1.0 - m))?)?;
        t.set(&next)?;
    }
    Ok(())
}

/// Cosine ramp of the EMA momentum from `base` at step 0 to 1 at `total`.
pub fn ema_schedule(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    1.0 - (1.0 - base) * ((PI * t).cos() + 1.0) / 2.0
}

/// Linear warmup to `base`, then cosine decay to `min`.
pub fn lr_schedule(base: f64, min: f64, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup).min(span) as f64) / span as f64;
    min + (base - min) * ((PI * t).cos() + 1.0) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub groups_per_batch: usize,
    pub per_group: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// EMA momentum at step 0; ramps to 1.
    pub ema_momentum: f64,
    pub drop: DropPolicy,
    pub mask_ratio: (f64, f64),
    pub crops: CropConfig,
    pub head: HeadConfig,
    pub antibody_loss: bool,
    pub antibody_temperature: f64,
    pub clip_grad: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy(image_size: usize) -> Self {
        Self {
            steps: 200,
            groups_per_batch: 4,
            per_group: 4,
            lr: 5e-4,
            min_lr: 1e-5,
            warmup_steps: 10,
            weight_decay: 0.04,
            ema_momentum: 0.99,
            drop: DropPolicy::None,
            mask_ratio: (0.1, 0.5),
            crops: CropConfig::toy(image_size),
            head: HeadConfig::default(),
            antibody_loss: true,
            antibody_temperature: 0.1,
            clip_grad: Some(3.0),
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig, schema: &GroupSchema) -> Result<()> {
        if self.groups_per_batch == 0 || self.per_group == 0 {
            return Err(Error::Config("batch needs at least one group and one sample".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config("learning rates must satisfy 0 <= min_lr <= lr, lr > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum must lie in [0, 1]".into()));
        }
        if !(self.antibody_temperature > 0.0) {
            return Err(Error::Config("antibody_temperature must be positive".into()));
        }
        self.drop.validate(schema.c1())?;
        if self.drop.is_active() && matches!(model, ModelConfig::Vit(_)) {
            return Err(Error::Config(
                "channel dropping needs a channel-adaptive (cce) encoder".into(),
            ));
        }
        if self.crops.global_size != model.image_size() {
            return Err(Error::Config(format!(
                "global crop size {} differs from model image size {}",
                self.crops.global_size,
                model.image_size()
            )));
        }
        self.crops.validate(model.patch_size())?;
        self.head.validate()
    }
}

/// Per-step record for the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub patch: f64,
    pub antibody: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub teacher_temperature: f64,
    pub dropped_context: usize,
}

#[derive(Debug)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    /// Batch mean of raw teacher cls logits, `[K]`, as fed to the center.
    pub teacher_cls_mean: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn forward_views(net: &Network, views: &[GroupedBatch], masks: Option<&[PatchMask]>, dtype: DType) -> Result<Vec<EncoderOutput>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mask = match masks {
                Some(m) if m[i].n_masked() > 0 => Some(m[i].to_tensor(dtype)?),
                _ => None,
            };
            net.backbone.forward(v, &ForwardOptions { mask, flip: false })
        })
        .collect()
}

/// Loss terms for one set of views. Returns `(total, cls, patch, antibody,
/// teacher cls projections)`.
pub struct Losses {
    pub total: Tensor,
    pub cls: Tensor,
    pub patch: Tensor,
    pub antibody: Tensor,
    pub teacher_cls: Vec<Projected>,
    pub teacher_patch: Vec<Projected>,
}

pub fn compute_losses(state: &DistillationState, views: &ViewSet, group_ids: &[usize], cfg: &TrainConfig) -> Result<Losses> {
    let dtype = state.student_params.dtype();
    let s_glob = forward_views(&state.student, &views.student_globals()?, Some(&views.patch_masks), dtype)?;
    let s_loc = forward_views(&state.student, &views.student_locals()?, None, dtype)?;
    let t_glob = forward_views(&state.teacher, &views.teacher_globals()?, None, dtype)?;

    let mut s_cls = Vec::with_capacity(s_glob.len() + s_loc.len());
    for o in s_glob.iter().chain(&s_loc) {
        s_cls.push(project(&o.cls, &state.student.cls_head, false)?);
    }
    let t_cls = t_glob
        .iter()
        .map(|o| project(&o.cls, &state.teacher.cls_head, true))
        .collect::<Result<Vec<_>>>()?;
    let cls = cls_distill_loss(&s_cls, &t_cls)?;

    let mut patch_terms = Vec::with_capacity(s_glob.len());
    let mut t_patch = Vec::with_capacity(t_glob.len());
    for (i, (s, t)) in s_glob.iter().zip(&t_glob).enumerate() {
        let zs = project(&s.patches, &state.student.patch_head, false)?;
        let zt = project(&t.patches, &state.teacher.patch_head, true)?;
        let mask = views.patch_masks[i].to_tensor(dtype)?;
        patch_terms.push(patch_distill_loss(&zs, &zt, &mask)?);
        t_patch.push(zt);
    }
    let patch = (Tensor::stack(&patch_terms, 0)?.sum_all()? / patch_terms.len() as f64)?;

    let antibody = if cfg.antibody_loss {
        let terms = s_glob
            .iter()
            .map(|o| antibody_contrastive_loss(&o.cls, group_ids, cfg.antibody_temperature))
            .collect::<Result<Vec<_>>>()?;
        (Tensor::stack(&terms, 0)?.sum_all()? / terms.len() as f64)?
    } else {
        Tensor::zeros((), dtype, cls.device())?
    };
    let total = ((&cls + &patch)? + &antibody)?;
    Ok(Losses {
        total,
        cls,
        patch,
        antibody,
        teacher_cls: t_cls,
        teacher_patch: t_patch,
    })
}

fn clip_gradients(grads: &mut GradStore, params: &ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in params.vars() {
        if let Some(g) = grads.get(&v) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in params.vars() {
            if let Some(g) = grads.get(&v) {
                let scaled = (g * scale)?;
                grads.insert(&v, scaled);
            }
        }
    }
    Ok(norm)
}

pub fn new_optimizer(state: &DistillationState, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        state.student_params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?)
}

/// One optimization step on prepared views: student gradient step, teacher
/// EMA, center updates.
pub fn train_step_on_views(
    state: &mut DistillationState,
    views: &ViewSet,
    group_ids: &[usize],
    cfg: &TrainConfig,
    opt: &mut AdamW,
) -> Result<StepOutput> {
    let step = state.step;
    let t_temp = cfg.head.teacher_temperature(step);
    state.teacher.cls_head.temperature_teacher = t_temp;
    state.teacher.patch_head.temperature_teacher = t_temp;

    let losses = compute_losses(state, views, group_ids, cfg)?;
    let total = scalar(&losses.total)?;
    let (cls, patch, antibody) = (scalar(&losses.cls)?, scalar(&losses.patch)?, scalar(&losses.antibody)?);
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step}: cls {cls}, patch {patch}, antibody {antibody}"
        )));
    }

    let mut grads = losses.total.backward()?;
    if let Some((name, _)) = state.teacher_params.iter().find(|(_, v)| grads.get(v).is_some()) {
        return Err(Error::Numeric(format!("teacher parameter `{name}` received a gradient")));
    }
    if let Some(max) = cfg.clip_grad {
        clip_gradients(&mut grads, &state.student_params, max)?;
    }
    let lr = lr_schedule(cfg.lr, cfg.min_lr, cfg.warmup_steps, step, cfg.steps);
    opt.set_learning_rate(lr);
    opt.step(&grads)?;

    let m = ema_schedule(cfg.ema_momentum, step, cfg.steps);
    ema_update(&state.teacher_params, &state.student_params, m)?;
    state.ema_momentum = m;

    let cls_logits = Tensor::stack(&losses.teacher_cls.iter().map(|p| p.logits.clone()).collect::<Vec<_>>(), 0)?;
    let teacher_cls_mean = state.teacher.cls_head.update_center(&cls_logits)?;
    let patch_logits = Tensor::stack(&losses.teacher_patch.iter().map(|p| p.logits.clone()).collect::<Vec<_>>(), 0)?;
    state.teacher.patch_head.update_center(&patch_logits)?;
    state.step += 1;

    Ok(StepOutput {
        metrics: StepMetrics {
            step,
            total,
            cls,
            patch,
            antibody,
            lr,
            ema_momentum: m,
            teacher_temperature: t_temp,
            dropped_context: views.dropped_context.len(),
        },
        teacher_cls_mean,
    })
}

/// Random generator for a given step, independent of how many steps ran
/// before in this process.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Sample a batch and its views, then take one step.
pub fn train_step(state: &mut DistillationState, ds: &Dataset, cfg: &TrainConfig, opt: &mut AdamW) -> Result<StepOutput> {
    let mut rng = step_rng(cfg.seed, state.step);
    let indices = ds.group_batch(cfg.groups_per_batch, cfg.per_group, &mut rng)?;
    let samples: Vec<&[f32]> = indices.iter().map(|&i| ds.images[i].as_slice()).collect();
    let group_ids: Vec<usize> = indices.iter().map(|&i| ds.samples[i].group_id).collect();
    let views = make_views(
        &samples,
        ds.image_size,
        &ds.schema,
        &cfg.crops,
        &cfg.drop,
        cfg.mask_ratio,
        state.model.patch_size(),
        state.student_params.dtype(),
        &mut rng,
    )?;
    train_step_on_views(state, &views, &group_ids, cfg, opt)
}

/// Run `cfg.steps - state.step` steps, calling `on_step` after each.
pub fn train(state: &mut DistillationState, ds: &Dataset, cfg: &TrainConfig, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
    cfg.validate(&state.model, &ds.schema)?;
    if ds.schema != state.schema {
        return Err(Error::Config("dataset manifest differs from the model schema".into()));
    }
    let mut opt = new_optimizer(state, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    while state.step < cfg.steps {
        let out = train_step(state, ds, cfg, &mut opt)?;
        on_step(&out.metrics)?;
        history.push(out.metrics);
    }
    Ok(history)
}
