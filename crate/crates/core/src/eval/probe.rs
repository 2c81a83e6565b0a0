//! Multi-label MLP probe on frozen embeddings.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingRecord;
use super::retrieval::average_precision;
use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden_dim: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            lr: 1e-3,
            max_epochs: 100,
            patience: 20,
            batch_size: 32,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("probe hidden_dim, batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::Config("probe needs lr > 0, focal_alpha in [0, 1], focal_gamma >= 0".into()));
        }
        Ok(())
    }
}

/// Per-element sigmoid focal loss, averaged.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    // ce = max(z, 0) - z*y + log(1 + exp(-|z|)), and p_t = exp(-ce)
    let ce = ((logits.relu()? - (logits * targets)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let p_t = ce.neg()?.exp()?;
    let modulator = p_t.affine(-1.0, 1.0)?.powf(gamma)?;
    let alpha_t = targets.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    Ok((alpha_t * modulator)?.mul(&ce)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct Probe {
    layers: [Linear; 3],
    /// Label indices the probe was trained on.
    pub labels: Vec<usize>,
}

impl Probe {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.gelu_erf()?;
        let h = self.layers[1].forward(&h)?.gelu_erf()?;
        Ok(self.layers[2].forward(&h)?)
    }

    /// Scores `[records, labels]` for the probe's label set.
    pub fn predict(&self, records: &[EmbeddingRecord]) -> Result<Vec<Vec<f32>>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.logits(&features(records)?)?.to_vec2::<f32>()?)
    }

    /// Macro mAP over trained labels that have at least one positive in
    /// `records`.
    pub fn evaluate(&self, records: &[EmbeddingRecord]) -> Result<ProbeReport> {
        let scores = self.predict(records)?;
        let mut per_label = Vec::new();
        for (col, &label) in self.labels.iter().enumerate() {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&a, &b| scores[b][col].total_cmp(&scores[a][col]).then(a.cmp(&b)));
            let rel: Vec<bool> = order.iter().map(|&i| records[i].multilabels[label]).collect();
            if rel.iter().any(|&r| r) {
                per_label.push((label, average_precision(&rel)));
            }
        }
        if per_label.is_empty() {
            return Err(Error::Eval("no probe label has a positive in the evaluation set".into()));
        }
        let map = per_label.iter().map(|(_, ap)| ap).sum::<f64>() / per_label.len() as f64;
        Ok(ProbeReport { map, per_label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub map: f64,
    pub per_label: Vec<(usize, f64)>,
}

fn features(records: &[EmbeddingRecord]) -> Result<Tensor> {
    let dim = records[0].vector.len();
    let flat: Vec<f32> = records.iter().flat_map(|r| r.vector.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(flat, (records.len(), dim), &Device::Cpu)?)
}

fn targets(records: &[EmbeddingRecord], labels: &[usize]) -> Result<Tensor> {
    let flat: Vec<f32> = records
        .iter()
        .flat_map(|r| labels.iter().map(|&l| if r.multilabels[l] { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(flat, (records.len(), labels.len()), &Device::Cpu)?)
}

/// Train on `train`, keep the epoch with the best validation mAP, stop after
/// `patience` epochs without improvement. Labels with no positive in `train`
/// are dropped with a warning.
pub fn train_probe(train: &[EmbeddingRecord], val: &[EmbeddingRecord], cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Eval("probe needs non-empty train and validation sets".into()));
    }
    let dim = train[0].vector.len();
    let n_labels = train[0].multilabels.len();
    if train.iter().chain(val).any(|r| r.vector.len() != dim || r.multilabels.len() != n_labels) {
        return Err(Error::Eval("probe records disagree on vector length or label count".into()));
    }
    let labels: Vec<usize> = (0..n_labels).filter(|&l| train.iter().any(|r| r.multilabels[l])).collect();
    for l in (0..n_labels).filter(|l| !labels.contains(l)) {
        log::warn!("label {l} has no positive training example; excluded from the probe");
    }
    if labels.is_empty() {
        return Err(Error::Eval("no label has a positive training example".into()));
    }

    let mut store = ParamStore::new(DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = {
        let mut pb = store.builder(&mut rng);
        [
            linear(&mut pb.pp("fc1"), dim, cfg.hidden_dim, true)?,
            linear(&mut pb.pp("fc2"), cfg.hidden_dim, cfg.hidden_dim, true)?,
            linear(&mut pb.pp("fc3"), cfg.hidden_dim, labels.len(), true)?,
        ]
    };
    let probe = Probe { layers, labels };
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;

    let x = features(train)?;
    let y = targets(train, &probe.labels)?;
    let mut order: Vec<u32> = (0..train.len() as u32).collect();
    let mut best = (f64::NEG_INFINITY, store.snapshot()?);
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let idx = Tensor::new(chunk, &Device::Cpu)?;
            let loss = focal_loss(&probe.logits(&x.index_select(&idx, 0)?)?, &y.index_select(&idx, 0)?, cfg.focal_alpha, cfg.focal_gamma)?;
            opt.backward_step(&loss)?;
        }
        let score = probe.evaluate(val).map(|r| r.map).unwrap_or(0.0);
        if score > best.0 {
            best = (score, store.snapshot()?);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    store.assign(&best.1)?;
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::embed::Level;
    use rand::Rng;

    fn record(vector: Vec<f64>, multilabels: Vec<bool>) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: String::new(),
            level: Level::Fov,
            vector,
            multilabels,
            class_id: 0,
            fov_id: 0,
            well_id: 0,
        }
    }

    #[test]
    fn focal_loss_matches_scalar_formula() {
        let z = [-2.0f32, -0.3, 0.0, 1.7];
        let t = [1.0f32, 0.0, 1.0, 0.0];
        let (alpha, gamma) = (0.25, 2.0);
        let mut want = 0.0;
        for (&zi, &yi) in z.iter().zip(&t) {
            let p = 1.0 / (1.0 + (-zi as f64).exp());
            let (pt, at) = if yi == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            want += -at * (1.0 - pt).powf(gamma) * pt.ln();
        }
        want /= 4.0;
        let got = focal_loss(&Tensor::new(&z, &Device::Cpu).unwrap(), &Tensor::new(&t, &Device::Cpu).unwrap(), alpha, gamma)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!((got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn separable_labels_are_learned() {
        // three labels, each a half-space with a margin of 0.2 around it
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.6, 0.8, 0.0], [0.5, -0.5, 0.5, 0.5]];
        let mut make = |n: usize| -> Vec<EmbeddingRecord> {
            let mut out = Vec::new();
            while out.len() < n {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let proj: Vec<f64> = dirs.iter().map(|d| d.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
                if proj.iter().all(|p: &f64| p.abs() > 0.2) {
                    out.push(record(v, proj.iter().map(|&p| p > 0.0).collect()));
                }
            }
            out
        };
        let (train, val, test) = (make(300), make(100), make(100));
        let probe = train_probe(&train, &val, &ProbeConfig::default()).unwrap();
        let r = probe.evaluate(&test).unwrap();
        assert!(r.map >= 0.99, "{r:?}");
    }

    #[test]
    fn label_missing_from_train_is_excluded() {
        let train = vec![record(vec![1.0], vec![true, false]), record(vec![-1.0], vec![false, false])];
        let val = vec![record(vec![1.0], vec![true, true])];
        let probe = train_probe(&train, &val, &ProbeConfig { max_epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(probe.labels, vec![0]);
        assert_eq!(probe.evaluate(&val).unwrap().per_label.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let recs: Vec<_> = (0..20).map(|i| record(vec![i as f64 / 10.0, 1.0], vec![i % 3 == 0])).collect();
        let cfg = ProbeConfig { max_epochs: 5, ..Default::default() };
        let a = train_probe(&recs, &recs, &cfg).unwrap().predict(&recs).unwrap();
        let b = train_probe(&recs, &recs, &cfg).unwrap().predict(&recs).unwrap();
        assert_eq!(a, b);
    }
}
