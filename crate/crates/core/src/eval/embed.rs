//! Frozen-encoder embeddings with inference-time channel dropping, group
//! flipping and cross-dataset sharing plans.

use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{Backbone, ForwardOptions};
use crate::error::{Error, Result};
use crate::schema::{split_groups, GroupSchema, OodSharingPlan, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Cell,
    Fov,
    Well,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub level: Level,
    pub vector: Vec<f64>,
    pub multilabels: Vec<bool>,
    pub class_id: usize,
    pub fov_id: usize,
    pub well_id: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EmbedOptions {
    /// Context channel names removed at inference.
    pub drop: Vec<String>,
    pub flip: bool,
    pub plan: Option<OodSharingPlan>,
    pub batch_size: Option<usize>,
}

/// Stack positions (within the context group) of the named channels.
pub fn context_positions(schema: &GroupSchema, names: &[String]) -> Result<Vec<usize>> {
    let context = schema.context_names();
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        match schema.find(n) {
            None => return Err(Error::Eval(format!("unknown channel `{n}`"))),
            Some(spec) if spec.role == Role::Concept => {
                return Err(Error::Eval(format!(
                    "`{n}` is a concept channel; only context channels can be dropped"
                )))
            }
            Some(_) => out.push(context.iter().position(|c| c == n).expect("context channel")),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.len() >= context.len() {
        return Err(Error::Eval("cannot drop every context channel".into()));
    }
    Ok(out)
}

/// Teacher cls embeddings for every sample, in dataset order.
pub fn embed_dataset(backbone: &Backbone, ds: &Dataset, opts: &EmbedOptions) -> Result<Vec<EmbeddingRecord>> {
    let dropped = context_positions(&ds.schema, &opts.drop)?;
    if !backbone.channel_adaptive() && (!dropped.is_empty() || opts.flip || opts.plan.is_some()) {
        return Err(Error::Eval(
            "channel dropping, flipping and sharing plans need a grouped (cce) encoder".into(),
        ));
    }
    let fwd = ForwardOptions {
        mask: None,
        flip: opts.flip,
    };
    let bs = opts.batch_size.unwrap_or(64).max(1);
    let chunks: Vec<Vec<usize>> = (0..ds.len()).collect::<Vec<_>>().chunks(bs).map(<[usize]>::to_vec).collect();
    let vectors: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|idx| -> Result<Vec<Vec<f64>>> {
            let x = ds.batch(idx, DType::F32)?;
            let passes = match &opts.plan {
                Some(plan) => plan.pass_inputs(&x, &ds.schema)?,
                None => vec![split_groups(&x, &ds.schema)?],
            };
            let mut per_pass = Vec::with_capacity(passes.len());
            for batch in passes {
                let batch = batch.drop_context(&dropped)?;
                let cls = backbone.forward(&batch, &fwd)?.cls.detach();
                per_pass.push(cls.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            }
            Ok((0..idx.len())
                .map(|row| per_pass.iter().flat_map(|p| p[row].iter().copied()).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    let records = vectors
        .into_iter()
        .flatten()
        .zip(&ds.samples)
        .map(|(vector, s)| EmbeddingRecord {
            sample_id: s.sample_id.clone(),
            level: Level::Cell,
            vector,
            multilabels: s.multilabels.clone(),
            class_id: s.class_id,
            fov_id: s.fov_id,
            well_id: s.well_id,
        })
        .collect::<Vec<_>>();
    if let Some(r) = records.iter().find(|r| r.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite embedding for {}", r.sample_id)));
    }
    Ok(records)
}
