//! Leave-one-out replicate retrieval (mAP and kNN accuracy) with the
//! normalization/whitening post-processing grid.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingRecord;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub knn_accuracy: f64,
    pub k: usize,
}

/// Average precision of a ranked relevance list: mean over relevant
/// positions of precision at that position. Zero when nothing is relevant.
pub fn average_precision(ranked: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Other indices ordered by decreasing cosine similarity to `q`; ties go to
/// the lower index.
fn ranking(vectors: &[Vec<f64>], q: usize) -> Vec<usize> {
    let sims: Vec<f64> = vectors.iter().map(|v| cosine(&vectors[q], v)).collect();
    let mut order: Vec<usize> = (0..vectors.len()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Leave-one-out retrieval over `vectors` with one class per row. Only rows
/// whose class has another member are used as queries; singletons stay in
/// the gallery.
pub fn retrieval_scores(vectors: &[Vec<f64>], classes: &[usize], k: usize) -> Result<RetrievalResult> {
    if vectors.len() != classes.len() {
        return Err(Error::Eval(format!("{} vectors but {} labels", vectors.len(), classes.len())));
    }
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in classes {
        *counts.entry(c).or_default() += 1;
    }
    let queries: Vec<usize> = (0..vectors.len()).filter(|&i| counts[&classes[i]] >= 2).collect();
    if queries.is_empty() {
        return Err(Error::Eval("retrieval is undefined when every class is a singleton".into()));
    }
    let (mut ap_sum, mut correct) = (0.0, 0usize);
    for &q in &queries {
        let order = ranking(vectors, q);
        let rel: Vec<bool> = order.iter().map(|&j| classes[j] == classes[q]).collect();
        ap_sum += average_precision(&rel);
        if knn_vote(&order[..k.min(order.len())], classes) == classes[q] {
            correct += 1;
        }
    }
    let n = queries.len() as f64;
    Ok(RetrievalResult {
        map: ap_sum / n,
        knn_accuracy: correct as f64 / n,
        k,
    })
}

/// Majority class among the neighbours; a tie goes to the tied class that
/// appears first in the ranking.
fn knn_vote(neighbours: &[usize], classes: &[usize]) -> usize {
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &j in neighbours {
        *votes.entry(classes[j]).or_default() += 1;
    }
    let best = votes.values().copied().max().unwrap_or(0);
    neighbours
        .iter()
        .map(|&j| classes[j])
        .find(|c| votes[c] == best)
        .expect("at least one neighbour")
}

pub fn retrieval_eval(records: &[EmbeddingRecord], k: usize) -> Result<RetrievalResult> {
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    retrieval_scores(&vectors, &classes, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Standardize,
    /// Median and 1.4826 × median absolute deviation.
    RobustStandardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    None,
    Pca,
    Zca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostProcess {
    pub normalization: Normalization,
    pub whitening: Whitening,
}

impl PostProcess {
    pub const IDENTITY: Self = Self {
        normalization: Normalization::None,
        whitening: Whitening::None,
    };

    pub fn grid() -> Vec<Self> {
        let mut out = Vec::new();
        for normalization in [Normalization::None, Normalization::Standardize, Normalization::RobustStandardize] {
            for whitening in [Whitening::None, Whitening::Pca, Whitening::Zca] {
                out.push(Self { normalization, whitening });
            }
        }
        out
    }

    /// Fit on `vectors` and return the transformed rows.
    pub fn apply(&self, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if vectors.is_empty() {
            return Ok(Vec::new());
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Eval("post-processing needs equal-length vectors".into()));
        }
        let x = normalize(vectors, self.normalization);
        Ok(match self.whitening {
            Whitening::None => x,
            w => whiten(&x, w),
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn normalize(vectors: &[Vec<f64>], mode: Normalization) -> Vec<Vec<f64>> {
    let n = vectors.len() as f64;
    let dim = vectors[0].len();
    let (center, scale): (Vec<f64>, Vec<f64>) = match mode {
        Normalization::None => return vectors.to_vec(),
        Normalization::Standardize => (0..dim)
            .map(|j| {
                let mean = vectors.iter().map(|v| v[j]).sum::<f64>() / n;
                let var = vectors.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip(),
        Normalization::RobustStandardize => (0..dim)
            .map(|j| {
                let mut col: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
                let med = median(&mut col);
                let mut dev: Vec<f64> = col.iter().map(|x| (x - med).abs()).collect();
                (med, 1.4826 * median(&mut dev))
            })
            .unzip(),
    };
    vectors
        .iter()
        .map(|v| {
            v.iter()
                .zip(center.iter().zip(&scale))
                .map(|(x, (c, s))| if *s > 0.0 { (x - c) / s } else { x - c })
                .collect()
        })
        .collect()
}

fn whiten(vectors: &[Vec<f64>], mode: Whitening) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let dim = vectors[0].len();
    let x = DMatrix::from_fn(n, dim, |i, j| vectors[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    // directions with (numerically) no variance are dropped rather than
    // blown up
    let floor = 1e-10 * top.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..dim).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let u = DMatrix::from_fn(dim, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&i| 1.0 / eig.eigenvalues[i].sqrt()),
    ));
    let projected = &centered * &u * inv_sqrt;
    let out = match mode {
        Whitening::Zca => projected * u.transpose(),
        _ => projected,
    };
    out.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedRetrieval {
    pub post: PostProcess,
    pub validation: RetrievalResult,
    pub test: RetrievalResult,
}

/// Fit every post-processing option on all records (labels unused), select
/// the best by validation mAP, and report the test split under it. Records
/// are split by `is_validation`.
pub fn tuned_retrieval(
    records: &[EmbeddingRecord],
    is_validation: impl Fn(&EmbeddingRecord) -> bool,
    k: usize,
) -> Result<TunedRetrieval> {
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let split = |rows: &[Vec<f64>], want: bool| -> (Vec<Vec<f64>>, Vec<usize>) {
        records
            .iter()
            .zip(rows)
            .filter(|(r, _)| is_validation(r) == want)
            .map(|(r, v)| (v.clone(), r.class_id))
            .unzip()
    };
    let mut best: Option<TunedRetrieval> = None;
    for post in PostProcess::grid() {
        let rows = post.apply(&vectors)?;
        let (vv, vc) = split(&rows, true);
        let validation = retrieval_scores(&vv, &vc, k)?;
        if best.as_ref().is_none_or(|b| validation.map > b.validation.map) {
            let (tv, tc) = split(&rows, false);
            best = Some(TunedRetrieval {
                post,
                validation,
                test: retrieval_scores(&tv, &tc, k)?,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ap_by_hand() {
        assert_eq!(average_precision(&[true, false, true]), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&[false, false]), 0.0);
        assert_eq!(average_precision(&[false, true]), 0.5);
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let v = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.95, 0.05], vec![0.0, 1.0], vec![0.1, 0.9], vec![0.05, 0.95]];
        let r = retrieval_scores(&v, &[0, 0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.knn_accuracy, 1.0);
    }

    #[test]
    fn all_singletons_is_an_error() {
        assert!(retrieval_scores(&[vec![1.0], vec![2.0]], &[0, 1], 1).is_err());
    }

    #[test]
    fn singleton_classes_only_fill_the_gallery() {
        // query 0 ranks the singleton (2) ahead of its partner (1)
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1]];
        let r = retrieval_scores(&v, &[0, 0, 1], 1).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.knn_accuracy, 0.0);
    }

    #[test]
    fn vote_tie_goes_to_nearest() {
        assert_eq!(knn_vote(&[3, 0, 1, 2], &[0, 1, 0, 1]), 1);
    }

    #[test]
    fn grid_has_nine_options_and_identity_is_noop() {
        assert_eq!(PostProcess::grid().len(), 9);
        let v = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(PostProcess::IDENTITY.apply(&v).unwrap(), v);
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let c: f64 = rng.random_range(-1.0..1.0);
                vec![a, 3.0 * a + 0.5 * b, -b + 0.2 * c + 2.0]
            })
            .collect();
        for w in [Whitening::Pca, Whitening::Zca] {
            let out = PostProcess { normalization: Normalization::None, whitening: w }.apply(&v).unwrap();
            let dim = out[0].len();
            for i in 0..dim {
                for j in 0..dim {
                    let c = out.iter().map(|r| r[i] * r[j]).sum::<f64>() / out.len() as f64;
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((c - want).abs() < 1e-9, "{w:?} cov[{i},{j}] = {c}");
                }
            }
        }
    }

    #[test]
    fn robust_standardize_uses_scaled_mad() {
        let v: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0, 100.0].iter().map(|&x| vec![x]).collect();
        let out = PostProcess { normalization: Normalization::RobustStandardize, whitening: Whitening::None }.apply(&v).unwrap();
        // median 3, MAD 1
        assert!((out[0][0] - (-2.0 / 1.4826)).abs() < 1e-12);
        assert!((out[2][0]).abs() < 1e-12);
    }
}
