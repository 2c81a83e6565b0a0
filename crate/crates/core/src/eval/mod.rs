//! Downstream evaluation of frozen encoders.

pub mod aggregate;
pub mod diagnostic;
pub mod embed;
pub mod probe;
pub mod retrieval;
pub mod table;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, LabelMode};
pub use diagnostic::{cosine_diagnostic, median, CosineCurves};
pub use embed::{context_positions, embed_dataset, EmbedOptions, EmbeddingRecord, Level};
pub use probe::{focal_loss, train_probe, Probe, ProbeConfig, ProbeReport};
pub use table::{decode_embeddings, encode_embeddings, read_embeddings, write_embeddings};
pub use retrieval::{average_precision, retrieval_eval, retrieval_scores, tuned_retrieval, PostProcess, RetrievalResult, TunedRetrieval};

use crate::dataset::Dataset;
use crate::encoder::Backbone;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Deterministic split by well: one in five wells validates, one in five
/// tests.
pub fn split_of(r: &EmbeddingRecord) -> Split {
    match r.well_id % 5 {
        0 => Split::Validation,
        1 => Split::Test,
        _ => Split::Train,
    }
}

pub fn select(records: &[EmbeddingRecord], split: Split) -> Vec<EmbeddingRecord> {
    records.iter().filter(|r| split_of(r) == split).cloned().collect()
}

/// Cell embeddings pooled to fields of view.
pub fn fov_embeddings(backbone: &Backbone, ds: &Dataset, opts: &EmbedOptions) -> Result<Vec<EmbeddingRecord>> {
    aggregate(&embed_dataset(backbone, ds, opts)?, Level::Fov, LabelMode::Union)
}

/// Cell embeddings pooled to fields of view, then to wells.
pub fn well_embeddings(backbone: &Backbone, ds: &Dataset, opts: &EmbedOptions) -> Result<Vec<EmbeddingRecord>> {
    let fov = aggregate(&embed_dataset(backbone, ds, opts)?, Level::Fov, LabelMode::Exact)?;
    aggregate(&fov, Level::Well, LabelMode::Exact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the full-context row.
    pub dropped: Option<String>,
    pub map: f64,
}

/// Probe trained once on full-context FoV embeddings, then evaluated on the
/// test wells with each context channel removed in turn.
pub fn limited_context_sweep(backbone: &Backbone, ds: &Dataset, cfg: &ProbeConfig) -> Result<Vec<SweepRow>> {
    let full = fov_embeddings(backbone, ds, &EmbedOptions::default())?;
    let probe = train_probe(&select(&full, Split::Train), &select(&full, Split::Validation), cfg)?;
    let mut rows = vec![SweepRow {
        dropped: None,
        map: probe.evaluate(&select(&full, Split::Test))?.map,
    }];
    for name in ds.schema.context_names() {
        let opts = EmbedOptions {
            drop: vec![name.clone()],
            ..Default::default()
        };
        let sparse = fov_embeddings(backbone, ds, &opts)?;
        rows.push(SweepRow {
            dropped: Some(name),
            map: probe.evaluate(&select(&sparse, Split::Test))?.map,
        });
    }
    Ok(rows)
}

/// Mean probe mAP lost when one context channel is removed.
pub fn mean_context_drop(rows: &[SweepRow]) -> f64 {
    let full = rows.iter().find(|r| r.dropped.is_none()).map_or(f64::NAN, |r| r.map);
    let sparse: Vec<f64> = rows.iter().filter(|r| r.dropped.is_some()).map(|r| r.map).collect();
    full - sparse.iter().sum::<f64>() / sparse.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipResult {
    pub unflipped: RetrievalResult,
    pub flipped: RetrievalResult,
}

/// Well-level retrieval with the branches used as trained and with the
/// group assignment switched.
pub fn flip_retrieval(backbone: &Backbone, ds: &Dataset, k: usize) -> Result<FlipResult> {
    let run = |flip| -> Result<RetrievalResult> {
        let wells = well_embeddings(backbone, ds, &EmbedOptions { flip, ..Default::default() })?;
        retrieval_eval(&wells, k)
    };
    Ok(FlipResult {
        unflipped: run(false)?,
        flipped: run(true)?,
    })
}
