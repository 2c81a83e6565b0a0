//! Synthetic microscopy-like data with controlled ground truth.
//!
//! Context channels render a shared cell geometry (nucleus ellipse, ER band,
//! microtubule rays) whose per-sample jitter is scaled by
//! `1 - context_coherence`. Concept channels render a class-dependent
//! compartment placed on a geometry that interpolates between the cell's
//! own geometry (`coupling = 1`) and an independent draw (`coupling = 0`).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleMeta};
use crate::error::{Error, Result};
use crate::schema::{ChannelSpec, GroupSchema, Role};

const CONTEXT_NAMES: [&str; 3] = ["nucleus", "er", "microtubules"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_context: usize,
    pub n_concept: usize,
    /// Number of compartment classes; also the multi-label width.
    pub n_classes: usize,
    /// Antibody analogs; group `g` belongs to class `g % n_classes`.
    pub n_groups: usize,
    pub cells_per_fov: usize,
    pub fovs_per_well: usize,
    pub context_coherence: f64,
    pub concept_context_coupling: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            image_size: 32,
            n_context: 3,
            n_concept: 1,
            n_classes: 4,
            n_groups: 16,
            cells_per_fov: 4,
            fovs_per_well: 2,
            context_coherence: 0.9,
            concept_context_coupling: 1.0,
            noise_level: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples", self.n_samples),
            ("image_size", self.image_size),
            ("n_context", self.n_context),
            ("n_concept", self.n_concept),
            ("n_classes", self.n_classes),
            ("n_groups", self.n_groups),
            ("cells_per_fov", self.cells_per_fov),
            ("fovs_per_well", self.fovs_per_well),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, v) in [
            ("context_coherence", self.context_coherence),
            ("concept_context_coupling", self.concept_context_coupling),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config("noise_level must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<GroupSchema> {
        let mut channels = Vec::new();
        for i in 0..self.n_context {
            let base = CONTEXT_NAMES[i % CONTEXT_NAMES.len()];
            let name = if i < CONTEXT_NAMES.len() { base.to_string() } else { format!("{base}{}", i / CONTEXT_NAMES.len() + 1) };
            channels.push((name, Role::Context));
        }
        for i in 0..self.n_concept {
            let name = if i == 0 { "protein".to_string() } else { format!("protein{}", i + 1) };
            channels.push((name, Role::Concept));
        }
        GroupSchema::new(
            channels
                .into_iter()
                .enumerate()
                .map(|(i, (name, role))| ChannelSpec { name, role, source_index: i })
                .collect(),
        )
    }

    /// Class of a group.
    pub fn class_of_group(&self, group: usize) -> usize {
        group % self.n_classes
    }

    /// Secondary compartment carried by odd groups, if any.
    pub fn secondary_of_group(&self, group: usize) -> Option<usize> {
        if self.n_classes < 2 || group % 2 == 0 {
            return None;
        }
        let primary = self.class_of_group(group);
        Some((primary + 1 + (group / self.n_classes) % (self.n_classes - 1)) % self.n_classes)
    }
}

/// Cell geometry in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub cx: f64,
    pub cy: f64,
    /// Nucleus semi-axes.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Geometry {
    fn canonical(size: f64) -> Self {
        Self {
            cx: size / 2.0,
            cy: size / 2.0,
            a: 0.2 * size,
            b: 0.15 * size,
            angle: 0.3,
        }
    }

    /// Canonical geometry perturbed by `jitter` in `[0, 1]`, using unit draws
    /// `u` in `[-1, 1]`.
    fn jittered(size: f64, jitter: f64, u: [f64; 5]) -> Self {
        let c = Self::canonical(size);
        Self {
            cx: c.cx + jitter * 0.22 * size * u[0],
            cy: c.cy + jitter * 0.22 * size * u[1],
            a: c.a * (1.0 + jitter * 0.4 * u[2]),
            b: c.b * (1.0 + jitter * 0.4 * u[3]),
            angle: c.angle + jitter * PI * u[4],
        }
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let m = |x: f64, y: f64| t * x + (1.0 - t) * y;
        Self {
            cx: m(self.cx, other.cx),
            cy: m(self.cy, other.cy),
            a: m(self.a, other.a),
            b: m(self.b, other.b),
            angle: m(self.angle, other.angle),
        }
    }

    /// Elliptical radius (1 on the nucleus boundary) and polar angle.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        (r, v.atan2(u))
    }
}

fn smooth_step(edge: f64, width: f64, x: f64) -> f64 {
    1.0 / (1.0 + (-(edge - x) / width).exp())
}

fn band(center: f64, width: f64, x: f64) -> f64 {
    (-((x - center) / width).powi(2)).exp()
}

/// Context template `kind` (0 nucleus, 1 ER, 2 microtubules).
fn context_value(kind: usize, g: &Geometry, x: f64, y: f64, phase: f64) -> f64 {
    let (r, phi) = g.polar(x, y);
    match kind % 3 {
        0 => 0.85 * smooth_step(1.0, 0.08, r),
        1 => {
            let reticulum = 0.65 + 0.35 * (5.0 * phi + phase).cos() * (9.0 * r).cos();
            0.8 * band(1.55, 0.35, r) * reticulum
        }
        _ => {
            // filaments over a cytoplasm-filling envelope
            let rays = (0.5 + 0.5 * (6.0 * phi + phase).cos()).powi(6);
            0.75 * (0.7 + 0.3 * rays) * smooth_step(2.3, 0.1, r) * smooth_step(r, 0.1, 0.7)
        }
    }
}

/// Concept compartment `class` on geometry `g`. Puncta positions are given
/// in (radius, angle) pairs.
fn concept_value(class: usize, g: &Geometry, x: f64, y: f64, puncta: &[(f64, f64)]) -> f64 {
    let (r, phi) = g.polar(x, y);
    let near = |width: f64| -> f64 {
        let (s, c) = g.angle.sin_cos();
        puncta
            .iter()
            .map(|&(pr, pa)| {
                let u = pr * pa.cos() * g.a;
                let v = pr * pa.sin() * g.b;
                let px = g.cx + c * u - s * v;
                let py = g.cy + s * u + c * v;
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                (-d2 / (2.0 * width * width)).exp()
            })
            .fold(0.0, f64::max)
    };
    match class % 8 {
        0 => 0.9 * smooth_step(0.95, 0.06, r) * (0.75 + 0.25 * (11.0 * phi).cos() * (7.0 * r).cos()),
        1 => 0.95 * band(1.0, 0.12, r),
        2 => 0.8 * band(1.6, 0.4, r),
        3 => near(1.2),
        4 => 0.95 * band(2.25, 0.12, r),
        5 => 0.9 * (0.5 + 0.5 * (3.0 * phi).cos()).powi(10) * smooth_step(2.3, 0.1, r),
        6 => near(1.0) * smooth_step(r, 0.1, 1.1),
        _ => 0.5 * smooth_step(2.3, 0.15, r),
    }
}

struct Rendered {
    meta: SampleMeta,
    image: Vec<f32>,
}

fn render_sample(cfg: &SynthConfig, i: usize) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    let size = cfg.image_size;
    let sf = size as f64;
    let fov_id = i / cfg.cells_per_fov;
    let well_id = fov_id / cfg.fovs_per_well;
    let group_id = well_id % cfg.n_groups;
    let class_id = cfg.class_of_group(group_id);
    let secondary = cfg.secondary_of_group(group_id);
    let mut multilabels = vec![false; cfg.n_classes];
    multilabels[class_id] = true;
    if let Some(s) = secondary {
        multilabels[s] = true;
    }

    let mut unit = || -> [f64; 5] { std::array::from_fn(|_| rng.random_range(-1.0..=1.0)) };
    let own = Geometry::jittered(sf, 1.0 - cfg.context_coherence, unit());
    let independent = Geometry::jittered(sf, 1.0, unit());
    let concept_geom = own.lerp(&independent, cfg.concept_context_coupling);
    let phase = (1.0 - cfg.context_coherence) * rng.random_range(-PI..PI);
    let n_puncta = 3;
    let puncta: Vec<(f64, f64)> = (0..n_puncta)
        .map(|_| (rng.random_range(0.0..0.6), rng.random_range(-PI..PI)))
        .collect();
    let outer_puncta: Vec<(f64, f64)> = (0..n_puncta)
        .map(|_| (rng.random_range(1.3..2.0), rng.random_range(-PI..PI)))
        .collect();
    let strength = rng.random_range(0.8..1.0);
    let noise = Normal::new(0.0, cfg.noise_level.max(0.0)).expect("finite std");

    let channels = cfg.n_context + cfg.n_concept;
    let mut image = Vec::with_capacity(channels * size * size);
    for ch in 0..channels {
        for yi in 0..size {
            for xi in 0..size {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let v = if ch < cfg.n_context {
                    context_value(ch, &own, x, y, phase)
                } else {
                    let k = ch - cfg.n_context;
                    let pick = |c: usize| {
                        let pts = if c % 8 == 6 { &outer_puncta } else { &puncta };
                        concept_value(c + k, &concept_geom, x, y, pts)
                    };
                    let primary = pick(class_id);
                    let extra = secondary.map_or(0.0, |s| 0.6 * pick(s));
                    strength * primary.max(extra)
                };
                let n = if cfg.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let q = ((v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
                image.push(q as f32);
            }
        }
    }
    Rendered {
        meta: SampleMeta {
            sample_id: format!("s{i:05}"),
            class_id,
            group_id,
            fov_id,
            well_id,
            multilabels,
        },
        image,
    }
}

/// Generate a dataset; bit-reproducible for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rendered: Vec<Rendered> = (0..cfg.n_samples).into_par_iter().map(|i| render_sample(cfg, i)).collect();
    let (samples, images) = rendered.into_iter().map(|r| (r.meta, r.image)).unzip();
    Dataset::new(cfg.schema()?, cfg.image_size, samples, images)
}

/// Binary nucleus mask used by the coupling checks: context channel 0 above
/// half its peak.
pub fn nucleus_mask(ds: &Dataset, sample: usize) -> Vec<f64> {
    let idx = ds.schema.source_indices(Role::Context)[0];
    ds.plane(sample, idx).iter().map(|&v| if v > 0.425 { 1.0 } else { 0.0 }).collect()
}
