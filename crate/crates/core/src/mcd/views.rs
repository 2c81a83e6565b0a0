//! Multi-crop view generation for student and teacher.

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::channel_drop::{choose_dropped, patch_mask, sample_drop_count, DropPolicy, PatchMask};
use crate::error::{Error, Result};
use crate::schema::{split_groups, GroupSchema, GroupedBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub global_crops: usize,
    pub local_crops: usize,
    /// Side of a global crop; the encoder's image size.
    pub global_size: usize,
    pub local_size: usize,
    /// Area fraction range of the source image covered by a crop.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub horizontal_flip: bool,
}

impl CropConfig {
    pub fn toy(image_size: usize) -> Self {
        Self {
            global_crops: 2,
            local_crops: 4,
            global_size: image_size,
            local_size: image_size / 2,
            global_scale: (0.4, 1.0),
            local_scale: (0.1, 0.4),
            horizontal_flip: true,
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.global_crops == 0 {
            return Err(Error::Config("at least one global crop is required".into()));
        }
        if self.global_crops + self.local_crops < 2 {
            return Err(Error::Config("cls distillation needs at least two views".into()));
        }
        for (name, size) in [("global", self.global_size), ("local", self.local_size)] {
            if size == 0 || size % patch_size != 0 {
                return Err(Error::Config(format!(
                    "{name} crop size {size} is not a positive multiple of patch size {patch_size}"
                )));
            }
        }
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} crop scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Square crop covering a random area fraction in `scale`, resized to `out`
/// pixels, applied identically to every channel of one `[C, h, w]` sample.
pub fn random_resized_crop<R: Rng>(
    sample: &[f32],
    channels: usize,
    size: usize,
    out: usize,
    scale: (f64, f64),
    flip: bool,
    rng: &mut R,
) -> Vec<f32> {
    let s = if scale.1 > scale.0 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
    let side = ((s.sqrt() * size as f64).round() as usize).clamp(1, size);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    let mirror = flip && rng.random_bool(0.5);
    let plane = size * size;
    let mut result = Vec::with_capacity(channels * out * out);
    for c in 0..channels {
        let img: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(size as u32, size as u32, sample[c * plane..(c + 1) * plane].to_vec())
                .expect("plane length matches image size");
        let cropped = imageops::crop_imm(&img, x0 as u32, y0 as u32, side as u32, side as u32).to_image();
        let mut resized = if side == out {
            cropped
        } else {
            imageops::resize(&cropped, out as u32, out as u32, FilterType::Triangle)
        };
        if mirror {
            imageops::flip_horizontal_in_place(&mut resized);
        }
        result.extend(resized.into_raw());
    }
    result
}

/// Views for one training step.
#[derive(Debug, Clone)]
pub struct ViewSet {
    /// Full-context global crops (teacher input before any teacher drop).
    pub global_views: Vec<GroupedBatch>,
    pub local_views: Vec<GroupedBatch>,
    /// One mask per student global view.
    pub patch_masks: Vec<PatchMask>,
    /// Context positions removed from every student view.
    pub dropped_context: Vec<usize>,
    /// Context positions removed from the teacher's views.
    pub teacher_dropped: Vec<usize>,
}

impl ViewSet {
    /// Student global views with the dropped context channels removed.
    pub fn student_globals(&self) -> Result<Vec<GroupedBatch>> {
        self.global_views.iter().map(|v| v.drop_context(&self.dropped_context)).collect()
    }

    pub fn student_locals(&self) -> Result<Vec<GroupedBatch>> {
        self.local_views.iter().map(|v| v.drop_context(&self.dropped_context)).collect()
    }

    pub fn teacher_globals(&self) -> Result<Vec<GroupedBatch>> {
        self.global_views.iter().map(|v| v.drop_context(&self.teacher_dropped)).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn crop_batch<R: Rng>(
    samples: &[&[f32]],
    channels: usize,
    size: usize,
    out: usize,
    scale: (f64, f64),
    flip: bool,
    schema: &GroupSchema,
    dtype: DType,
    rng: &mut R,
) -> Result<GroupedBatch> {
    let mut data = Vec::with_capacity(samples.len() * channels * out * out);
    for s in samples {
        data.extend(random_resized_crop(s, channels, size, out, scale, flip, rng));
    }
    let x = Tensor::from_vec(data, (samples.len(), channels, out, out), &Device::Cpu)?.to_dtype(dtype)?;
    split_groups(&x, schema)
}

/// Draw crops, patch masks and the dropped context set for one step.
/// `samples` are `[C, size, size]` planes in schema stack order.
#[allow(clippy::too_many_arguments)]
pub fn make_views<R: Rng>(
    samples: &[&[f32]],
    size: usize,
    schema: &GroupSchema,
    crops: &CropConfig,
    policy: &DropPolicy,
    mask_ratio: (f64, f64),
    patch_size: usize,
    dtype: DType,
    rng: &mut R,
) -> Result<ViewSet> {
    let channels = schema.n_channels();
    if samples.iter().any(|s| s.len() != channels * size * size) {
        return Err(Error::Shape(format!(
            "every sample must hold {channels} planes of {size}x{size}"
        )));
    }
    let c1 = schema.c1();
    let c = sample_drop_count(policy, c1, rng)?;
    let dropped_context = choose_dropped(c1, c, rng)?;
    let teacher_dropped = if policy.drops_teacher() {
        choose_dropped(c1, c, rng)?
    } else {
        Vec::new()
    };
    let global_views = (0..crops.global_crops)
        .map(|_| {
            crop_batch(samples, channels, size, crops.global_size, crops.global_scale, crops.horizontal_flip, schema, dtype, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let local_views = (0..crops.local_crops)
        .map(|_| {
            crop_batch(samples, channels, size, crops.local_size, crops.local_scale, crops.horizontal_flip, schema, dtype, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = crops.global_size / patch_size;
    let patch_masks = (0..crops.global_crops)
        .map(|_| patch_mask(samples.len(), grid * grid, mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        global_views,
        local_views,
        patch_masks,
        dropped_context,
        teacher_dropped,
    })
}
