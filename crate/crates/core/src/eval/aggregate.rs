//! Hierarchical mean pooling: cells to fields of view, fields of view to
//! wells.

use std::collections::BTreeMap;

use super::embed::{EmbeddingRecord, Level};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Multi-labels are OR-ed within a group (probing).
    Union,
    /// Every member must share the class id (retrieval).
    Exact,
}

fn key(r: &EmbeddingRecord, to: Level) -> usize {
    match to {
        Level::Cell => unreachable!("cells are never an aggregation target"),
        Level::Fov => r.fov_id,
        Level::Well => r.well_id,
    }
}

/// Unweighted mean per group at the next level. Output is ordered by group
/// key.
pub fn aggregate(records: &[EmbeddingRecord], to: Level, mode: LabelMode) -> Result<Vec<EmbeddingRecord>> {
    let from = match records.first() {
        Some(r) => r.level,
        None => return Ok(Vec::new()),
    };
    if records.iter().any(|r| r.level != from) {
        return Err(Error::Eval("records mix aggregation levels".into()));
    }
    if to <= from {
        return Err(Error::Eval(format!("cannot aggregate {from:?} records to {to:?}")));
    }
    let dim = records[0].vector.len();
    let mut groups: BTreeMap<usize, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::Eval(format!("{}: vector length {} differs from {dim}", r.sample_id, r.vector.len())));
        }
        groups.entry(key(r, to)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, members)| {
            let first = members[0];
            if mode == LabelMode::Exact {
                if let Some(other) = members.iter().find(|m| m.class_id != first.class_id) {
                    return Err(Error::Eval(format!(
                        "{to:?} {k} mixes classes {} and {}",
                        first.class_id, other.class_id
                    )));
                }
            }
            let n = members.len() as f64;
            let mut vector = vec![0.0; dim];
            let mut multilabels = vec![false; first.multilabels.len()];
            for m in &members {
                for (acc, v) in vector.iter_mut().zip(&m.vector) {
                    *acc += v;
                }
                for (acc, &l) in multilabels.iter_mut().zip(&m.multilabels) {
                    *acc |= l;
                }
            }
            vector.iter_mut().for_each(|v| *v /= n);
            Ok(EmbeddingRecord {
                sample_id: format!("{}-{k}", match to {
                    Level::Fov => "fov",
                    _ => "well",
                }),
                level: to,
                vector,
                multilabels,
                class_id: first.class_id,
                fov_id: if to == Level::Fov { k } else { first.fov_id },
                well_id: first.well_id,
            })
        })
        .collect()
}
