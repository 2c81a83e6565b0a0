//! Full-versus-sparse context similarity at the context branch output and at
//! the final cls token.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::retrieval::cosine;
use crate::dataset::Dataset;
use crate::encoder::{CceEncoder, ForwardOptions};
use crate::error::{Error, Result};
use crate::schema::split_groups;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineCurves {
    pub drop_count: usize,
    /// Per sample, averaged over every subset of `drop_count` context
    /// channels.
    pub intermediate: Vec<f64>,
    pub final_cls: Vec<f64>,
}

pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let b = t.dims()[0];
    Ok(t.reshape((b, ()))?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Compare the pooled context branch output (flattened over tokens) and the
/// final cls token between the full input and every `drop_count`-channel
/// sparse input, for the given samples.
pub fn cosine_diagnostic(encoder: &CceEncoder, ds: &Dataset, samples: &[usize], drop_count: usize) -> Result<CosineCurves> {
    let n_context = ds.schema.context_names().len();
    if drop_count >= n_context {
        return Err(Error::Eval(format!(
            "drop count {drop_count} must be below the {n_context} context channels"
        )));
    }
    let opts = ForwardOptions::default();
    let mut intermediate = Vec::with_capacity(samples.len());
    let mut final_cls = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let batch = split_groups(&ds.batch(chunk, DType::F32)?, &ds.schema)?;
        let full = encoder.forward_grouped(&batch, &opts)?;
        let p_full = rows(full.context_branch.as_ref().expect("cce exposes the branch"))?;
        let y_full = rows(&full.cls)?;
        let mut acc_p = vec![0.0; chunk.len()];
        let mut acc_y = vec![0.0; chunk.len()];
        let subsets = subsets(n_context, drop_count);
        for s in &subsets {
            let sparse = encoder.forward_grouped(&batch.drop_context(s)?, &opts)?;
            let p = rows(sparse.context_branch.as_ref().expect("cce exposes the branch"))?;
            let y = rows(&sparse.cls)?;
            for i in 0..chunk.len() {
                acc_p[i] += cosine(&p_full[i], &p[i]);
                acc_y[i] += cosine(&y_full[i], &y[i]);
            }
        }
        let m = subsets.len() as f64;
        intermediate.extend(acc_p.into_iter().map(|v| v / m));
        final_cls.extend(acc_y.into_iter().map(|v| v / m));
    }
    Ok(CosineCurves {
        drop_count,
        intermediate,
        final_cls,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
