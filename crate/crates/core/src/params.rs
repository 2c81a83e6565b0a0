//! Named, seeded parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] keyed by a dotted path
//! (`branch.context.0.attn.qkv.weight`). Models hold cheap clones of the
//! underlying [`Var`]s, so in-place updates (optimizer steps, EMA) are
//! visible to every holder. Initialization draws from a caller-supplied
//! ChaCha stream rather than candle's global RNG so that construction is
//! bit-reproducible under a seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    /// Uniform in [-bound, bound].
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Total scalar count over parameters whose name passes `keep`.
    pub fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn num_elements(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Insert a tensor under `name`, converting to the store dtype.
    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    /// Independent copy: new `Var`s with identical contents.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = ParamStore {
            vars: BTreeMap::new(),
            dtype: self.dtype,
            device: self.device.clone(),
        };
        for (k, v) in &self.vars {
            let copy = v.as_tensor().copy()?.detach();
            out.vars.insert(k.clone(), Var::from_tensor(&copy)?);
        }
        Ok(out)
    }

    /// Copy of the store re-cast to another dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (k, v) in &self.vars {
            out.insert(k.clone(), &v.as_tensor().copy()?.detach())?;
        }
        Ok(out)
    }

    /// Detached copy of every tensor, in name order. Later updates to the
    /// store do not show through.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrite the contents of existing parameters in place.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in values {
            let var = self
                .vars
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{k}`")))?;
            if var.dims() != v.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{k}`: stored {:?}, assigned {:?}",
                    var.dims(),
                    v.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }
}

/// Hierarchical constructor view over a [`ParamStore`].
///
/// `param` returns the existing variable when the name is already present
/// (after a checkpoint load or a teacher copy) and initializes it otherwise.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, segment: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{}", self.prefix, segment)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if let Some(existing) = self.store.vars.get(&full) {
            if existing.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{full}` has shape {:?}, model expects {:?}",
                    existing.dims(),
                    shape
                )));
            }
            return Ok(existing.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(out)
    }
}
