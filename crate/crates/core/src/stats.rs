//! Channel parity and entropy: embed every channel on its own through a
//! frozen 3-channel extractor, cluster all features together, and measure
//! how concentrated each channel is in a single cluster.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{ForwardOptions, VitConfig, VitEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schema::{ChannelSpec, GroupSchema, Role};

/// A frozen encoder taking `[B, 3, s, s]` images.
pub trait FeatureExtractor: Sync {
    fn input_size(&self) -> usize;
    fn extract(&self, x: &Tensor) -> Result<Tensor>;
}

/// Mean patch token of a 3-channel ViT.
#[derive(Debug, Clone)]
pub struct VitExtractor {
    encoder: VitEncoder,
}

impl VitExtractor {
    pub fn default_config(image_size: usize) -> VitConfig {
        VitConfig {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            patch_size: if image_size % 8 == 0 { 8 } else { image_size },
            image_size,
            in_channels: 3,
            instance_norm: true,
        }
    }

    /// Seeded random weights.
    pub fn random(cfg: &VitConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_store(&mut store, &mut rng, cfg)
    }

    /// Weights from `store`; names missing from it are initialized from
    /// `rng`.
    pub fn from_store(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &VitConfig) -> Result<Self> {
        if cfg.in_channels != 3 {
            return Err(Error::Config(format!("extractor needs 3 input channels, got {}", cfg.in_channels)));
        }
        Ok(Self {
            encoder: VitEncoder::new(&mut store.builder(rng), cfg)?,
        })
    }
}

impl FeatureExtractor for VitExtractor {
    fn input_size(&self) -> usize {
        self.encoder.config().image_size
    }

    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(x, &ForwardOptions::default())?.patches.mean(1)?)
    }
}

/// Features of one channel for the given samples, the plane repeated three
/// times along the channel axis.
pub fn extract_channel_features(
    ds: &Dataset,
    channel: &str,
    samples: &[usize],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Vec<f64>>> {
    if extractor.input_size() != ds.image_size {
        return Err(Error::Shape(format!(
            "extractor expects {}px inputs, dataset has {}px",
            extractor.input_size(),
            ds.image_size
        )));
    }
    let ch = ds
        .schema
        .channels()
        .iter()
        .position(|c| c.name == channel)
        .ok_or_else(|| Error::Schema(format!("unknown channel `{channel}`")))?;
    let s = ds.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
        for &i in chunk {
            if i >= ds.len() {
                return Err(Error::Dataset(format!("sample index {i} out of range")));
            }
            let plane = ds.plane(i, ch);
            for _ in 0..3 {
                data.extend_from_slice(plane);
            }
        }
        let x = Tensor::from_vec(data, (chunk.len(), 3, s, s), &candle_core::Device::Cpu)?;
        let f = extractor.extract(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        out.extend(f);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; the lowest index wins a tie.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm from a seeded k-means++ start. Clusters that end up
/// empty keep their previous centroid and are reported with size 0.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::Config("k-means needs k >= 2".into()));
    }
    if points.len() < k {
        return Err(Error::Config(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (k_best, _) = nearest(p, &centroids);
            if *l != k_best {
                *l = k_best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let mut sizes = vec![0; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let inertia = labels.iter().zip(points).map(|(&l, p)| sq_dist(p, &centroids[l])).sum();
    Ok(KMeans {
        centroids,
        labels,
        sizes,
        iterations,
        inertia,
    })
}

/// Best of `restarts` seeded runs by inertia; the earliest run wins a tie.
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, restarts: usize) -> Result<KMeans> {
    let mut best = kmeans(points, k, seed, max_iter)?;
    for r in 1..restarts {
        let run = kmeans(points, k, seed.wrapping_add(r as u64 * 0x9E37_79B9), max_iter)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDistribution {
    pub channel: String,
    /// Fraction of the channel's samples in each cluster.
    pub p: Vec<f64>,
    pub n_samples: usize,
}

impl ChannelDistribution {
    pub fn from_labels(channel: impl Into<String>, labels: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Eval("channel has no samples".into()));
        }
        let mut counts = vec![0usize; k];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Eval(format!("cluster label {l} out of range for k={k}")))? += 1;
        }
        Ok(Self {
            channel: channel.into(),
            p: counts.iter().map(|&c| c as f64 / labels.len() as f64).collect(),
            n_samples: labels.len(),
        })
    }
}

/// Parity (largest cluster share) and base-2 entropy, with 0·log 0 = 0.
pub fn parity_entropy(p: &[f64]) -> (f64, f64) {
    let parity = p.iter().copied().fold(0.0, f64::max);
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum();
    (parity, if h > 0.0 { h } else { 0.0 })
}

/// Lowest cluster index with the largest share.
pub fn assigned_cluster(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: String,
    pub parity: f64,
    pub entropy: f64,
    pub assigned_cluster: usize,
    pub distribution: Vec<f64>,
    pub n_samples: usize,
    pub suggested_role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub k: usize,
    pub threshold: f64,
    pub channels: Vec<ChannelReport>,
}

impl StatsReport {
    pub fn from_distributions(dists: &[ChannelDistribution], threshold: f64) -> Result<Self> {
        if dists.len() < 2 {
            return Err(Error::Eval("a channel report needs at least two channels".into()));
        }
        let k = dists[0].p.len();
        let channels = dists
            .iter()
            .map(|d| {
                let (parity, entropy) = parity_entropy(&d.p);
                ChannelReport {
                    channel: d.channel.clone(),
                    parity,
                    entropy,
                    assigned_cluster: assigned_cluster(&d.p),
                    distribution: d.p.clone(),
                    n_samples: d.n_samples,
                    suggested_role: if parity > threshold { Role::Context } else { Role::Concept },
                }
            })
            .collect();
        Ok(Self { k, threshold, channels })
    }

    /// Rows by decreasing parity; the input order breaks ties.
    pub fn ranked(&self) -> Vec<&ChannelReport> {
        let mut rows: Vec<&ChannelReport> = self.channels.iter().collect();
        rows.sort_by(|a, b| b.parity.total_cmp(&a.parity));
        rows
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k = {}, context threshold P > {}", self.k, self.threshold);
        let _ = writeln!(s, "{:<16} {:>7} {:>7} {:>8}  suggested", "channel", "P_c", "H_c", "cluster");
        for r in self.ranked() {
            let _ = writeln!(
                s,
                "{:<16} {:>7.3} {:>7.3} {:>8}  {}",
                r.channel, r.parity, r.entropy, r.assigned_cluster, r.suggested_role
            );
        }
        s
    }

    /// Schema built from the suggested roles, in report order.
    pub fn suggested_schema(&self) -> Result<GroupSchema> {
        GroupSchema::new(
            self.channels
                .iter()
                .enumerate()
                .map(|(i, r)| ChannelSpec {
                    name: r.channel.clone(),
                    role: r.suggested_role,
                    source_index: i,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Samples per channel; all when larger than the dataset.
    pub samples_per_channel: usize,
    /// Clusters; the channel count when absent.
    pub k: Option<usize>,
    pub threshold: f64,
    pub max_iter: usize,
    /// Independent k-means++ starts; the lowest inertia is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            samples_per_channel: 1000,
            k: None,
            threshold: 0.8,
            max_iter: 300,
            restarts: 10,
            seed: 0,
        }
    }
}

/// Full pipeline: features for every channel, joint k-means, per-channel
/// parity and entropy.
pub fn channel_stats(ds: &Dataset, extractor: &dyn FeatureExtractor, cfg: &StatsConfig) -> Result<StatsReport> {
    if ds.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let names: Vec<String> = ds.schema.channels().iter().map(|c| c.name.clone()).collect();
    let k = cfg.k.unwrap_or(names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples_per_channel.min(ds.len());
    let samples: Vec<usize> = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    let mut features = Vec::with_capacity(n * names.len());
    for name in &names {
        features.extend(extract_channel_features(ds, name, &samples, extractor)?);
    }
    let km = kmeans_restarts(&features, k, cfg.seed, cfg.max_iter, cfg.restarts.max(1))?;
    let dists = names
        .iter()
        .enumerate()
        .map(|(c, name)| ChannelDistribution::from_labels(name.clone(), &km.labels[c * n..(c + 1) * n], k))
        .collect::<Result<Vec<_>>>()?;
    StatsReport::from_distributions(&dists, cfg.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(parity_entropy(&[1.0, 0.0, 0.0, 0.0]), (1.0, 0.0));
        assert_eq!(parity_entropy(&[0.25; 4]), (0.25, 2.0));
        assert_eq!(parity_entropy(&[0.5, 0.5, 0.0, 0.0]), (0.5, 1.0));
    }

    #[test]
    fn assigned_cluster_prefers_lowest_index() {
        assert_eq!(assigned_cluster(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(assigned_cluster(&[0.5, 0.5]), 0);
    }

    #[test]
    fn separated_blobs_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = Vec::new();
        for center in [0.0, 50.0] {
            for _ in 0..40 {
                pts.push(vec![center + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
        }
        let km = kmeans(&pts, 2, 7, 100).unwrap();
        let a = ChannelDistribution::from_labels("a", &km.labels[..40], 2).unwrap();
        let b = ChannelDistribution::from_labels("b", &km.labels[40..], 2).unwrap();
        assert_eq!(parity_entropy(&a.p), (1.0, 0.0));
        assert_eq!(parity_entropy(&b.p), (1.0, 0.0));
        assert_ne!(assigned_cluster(&a.p), assigned_cluster(&b.p));
        assert_eq!(km, kmeans(&pts, 2, 7, 100).unwrap());
    }

    #[test]
    fn identical_points_collapse_to_one_cluster() {
        let pts = vec![vec![1.0, 2.0]; 12];
        let km = kmeans(&pts, 4, 0, 50).unwrap();
        assert_eq!(km.sizes, vec![12, 0, 0, 0]);
        let d = ChannelDistribution::from_labels("x", &km.labels, 4).unwrap();
        assert_eq!(parity_entropy(&d.p), (1.0, 0.0));
    }

    #[test]
    fn kmeans_preconditions() {
        assert!(kmeans(&[vec![0.0]], 1, 0, 10).is_err());
        assert!(kmeans(&[vec![0.0], vec![1.0]], 3, 0, 10).is_err());
        assert!(ChannelDistribution::from_labels("x", &[], 2).is_err());
    }

    #[test]
    fn same_image_twice_gives_identical_features() {
        let ds = crate::synth::generate(&crate::synth::SynthConfig { n_samples: 3, image_size: 16, ..Default::default() }).unwrap();
        let ex = VitExtractor::random(&VitExtractor::default_config(16), 0).unwrap();
        let f = extract_channel_features(&ds, "nucleus", &[1, 1], &ex).unwrap();
        assert_eq!(f[0], f[1]);
        let wrong = VitExtractor::random(&VitExtractor::default_config(32), 0).unwrap();
        assert!(extract_channel_features(&ds, "nucleus", &[0], &wrong).is_err());
        assert!(extract_channel_features(&ds, "golgi", &[0], &ex).is_err());
    }

    #[test]
    fn suggestions_follow_threshold() {
        let d = |name: &str, p: Vec<f64>| ChannelDistribution { channel: name.into(), p, n_samples: 10 };
        let r = StatsReport::from_distributions(&[d("a", vec![0.9, 0.1]), d("b", vec![0.6, 0.4])], 0.8).unwrap();
        assert_eq!(r.channels[0].suggested_role, Role::Context);
        assert_eq!(r.channels[1].suggested_role, Role::Concept);
        let schema = r.suggested_schema().unwrap();
        assert_eq!(schema.context_names(), vec!["a".to_string()]);
        assert!(r.to_table().contains("concept"));
    }
}
