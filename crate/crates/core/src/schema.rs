//! Channel identities, context/concept grouping, and cross-dataset sharing
//! plans.
//!
//! A manifest is a small TOML document with one `[[channel]]` record per
//! stored channel:
//!
//! ```toml
//! [[channel]]
//! name = "Nucleus"
//! role = "context"
//! index = 1
//! ```
//!
//! Record order defines within-group order; `index` is the channel's position
//! in the stored image stack.

use std::collections::HashSet;
use std::fmt;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Context,
    Concept,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Context => f.write_str("context"),
            Role::Concept => f.write_str("concept"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub role: Role,
    #[serde(rename = "index")]
    pub source_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(rename = "channel", default)]
    channels: Vec<ChannelSpec>,
}

/// Validated assignment of stored channels to the context and concept groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchema {
    channels: Vec<ChannelSpec>,
}

impl GroupSchema {
    pub fn new(channels: Vec<ChannelSpec>) -> Result<Self> {
        let mut names = HashSet::new();
        for ch in &channels {
            if ch.name.trim().is_empty() {
                return Err(Error::Schema("empty channel name".into()));
            }
            if !names.insert(ch.name.as_str()) {
                return Err(Error::Schema(format!("duplicate channel name `{}`", ch.name)));
            }
        }
        let total = channels.len();
        let mut seen = vec![false; total];
        for ch in &channels {
            match seen.get_mut(ch.source_index) {
                Some(slot) if !*slot => *slot = true,
                Some(_) => {
                    return Err(Error::Schema(format!(
                        "index {} assigned to more than one channel",
                        ch.source_index
                    )))
                }
                None => {
                    return Err(Error::Schema(format!(
                        "channel `{}` has index {} outside 0..{}",
                        ch.name, ch.source_index, total
                    )))
                }
            }
        }
        let schema = Self { channels };
        if schema.c1() == 0 {
            return Err(Error::Schema("schema needs at least one context channel".into()));
        }
        if schema.c2() == 0 {
            return Err(Error::Schema("schema needs at least one concept channel".into()));
        }
        Ok(schema)
    }

    /// Convenience constructor: channels listed in stack order.
    pub fn from_roles(channels: &[(&str, Role)]) -> Result<Self> {
        Self::new(
            channels
                .iter()
                .enumerate()
                .map(|(i, (name, role))| ChannelSpec {
                    name: (*name).to_string(),
                    role: *role,
                    source_index: i,
                })
                .collect(),
        )
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn c1(&self) -> usize {
        self.group(Role::Context).count()
    }

    pub fn c2(&self) -> usize {
        self.group(Role::Concept).count()
    }

    pub fn group(&self, role: Role) -> impl Iterator<Item = &ChannelSpec> {
        self.channels.iter().filter(move |c| c.role == role)
    }

    pub fn context_names(&self) -> Vec<String> {
        self.group(Role::Context).map(|c| c.name.clone()).collect()
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.group(Role::Concept).map(|c| c.name.clone()).collect()
    }

    /// Stack indices of a group, in manifest order.
    pub fn source_indices(&self, role: Role) -> Vec<usize> {
        self.group(role).map(|c| c.source_index).collect()
    }

    pub fn find(&self, name: &str) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Channel names ordered by stack position.
    pub fn stack_names(&self) -> Vec<String> {
        let mut v: Vec<&ChannelSpec> = self.channels.iter().collect();
        v.sort_by_key(|c| c.source_index);
        v.into_iter().map(|c| c.name.clone()).collect()
    }

    pub fn to_manifest(&self) -> String {
        let m = Manifest {
            channels: self.channels.clone(),
        };
        toml::to_string(&m).expect("manifest serialization is infallible")
    }
}

pub fn parse_schema(manifest: &str) -> Result<GroupSchema> {
    let m: Manifest =
        toml::from_str(manifest).map_err(|e| Error::Schema(format!("manifest: {e}")))?;
    GroupSchema::new(m.channels)
}

/// A batch split into its context and concept stacks.
#[derive(Debug, Clone)]
pub struct GroupedBatch {
    /// `[B, C1, h, w]`
    pub context: Tensor,
    /// `[B, C2, h, w]`
    pub concept: Tensor,
}

impl GroupedBatch {
    pub fn new(context: Tensor, concept: Tensor) -> Result<Self> {
        let (b1, _, h1, w1) = context.dims4()?;
        let (b2, _, h2, w2) = concept.dims4()?;
        if (b1, h1, w1) != (b2, h2, w2) {
            return Err(Error::Shape(format!(
                "context [{b1}, _, {h1}, {w1}] vs concept [{b2}, _, {h2}, {w2}]"
            )));
        }
        Ok(Self { context, concept })
    }

    pub fn batch_size(&self) -> usize {
        self.context.dims()[0]
    }

    pub fn n_context(&self) -> usize {
        self.context.dims()[1]
    }

    pub fn n_concept(&self) -> usize {
        self.concept.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.context.dims();
        (d[2], d[3])
    }

    /// Keep only the listed context positions (within-group order).
    pub fn select_context(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Shape("cannot remove every context channel".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.n_context()) {
            return Err(Error::Shape(format!(
                "context position {bad} out of range for {} channels",
                self.n_context()
            )));
        }
        let idx = index_tensor(keep, self.context.device())?;
        Ok(Self {
            context: self.context.index_select(&idx, 1)?,
            concept: self.concept.clone(),
        })
    }

    /// Drop the listed context positions (within-group order).
    pub fn drop_context(&self, dropped: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_context())
            .filter(|i| !dropped.contains(i))
            .collect();
        self.select_context(&keep)
    }

    pub fn select_concept(&self, keep: &[usize]) -> Result<Self> {
        let idx = index_tensor(keep, self.concept.device())?;
        Ok(Self {
            context: self.context.clone(),
            concept: self.concept.index_select(&idx, 1)?,
        })
    }

    pub fn to_dtype(&self, dtype: candle_core::DType) -> Result<Self> {
        Ok(Self {
            context: self.context.to_dtype(dtype)?,
            concept: self.concept.to_dtype(dtype)?,
        })
    }
}

pub(crate) fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

pub fn split_groups(x: &Tensor, schema: &GroupSchema) -> Result<GroupedBatch> {
    let (_, c, _, _) = x.dims4()?;
    if c != schema.n_channels() {
        return Err(Error::Shape(format!(
            "input has {c} channels, schema expects {}",
            schema.n_channels()
        )));
    }
    let ctx = index_tensor(&schema.source_indices(Role::Context), x.device())?;
    let con = index_tensor(&schema.source_indices(Role::Concept), x.device())?;
    GroupedBatch::new(x.index_select(&ctx, 1)?, x.index_select(&con, 1)?)
}

/// Inverse of [`split_groups`]: re-interleave by stack index.
pub fn merge_groups(batch: &GroupedBatch, schema: &GroupSchema) -> Result<Tensor> {
    if batch.n_context() != schema.c1() || batch.n_concept() != schema.c2() {
        return Err(Error::Shape(format!(
            "batch has {}+{} channels, schema {}+{}",
            batch.n_context(),
            batch.n_concept(),
            schema.c1(),
            schema.c2()
        )));
    }
    let stacked = Tensor::cat(&[&batch.context, &batch.concept], 1)?;
    // position in `stacked` of each stack index
    let order: Vec<usize> = schema
        .source_indices(Role::Context)
        .into_iter()
        .chain(schema.source_indices(Role::Concept))
        .collect();
    let mut inverse = vec![0usize; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inverse[src] = pos;
    }
    Ok(stacked.index_select(&index_tensor(&inverse, stacked.device())?, 1)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodPass {
    pub context: Vec<String>,
    pub concept: String,
}

/// One forward pass per concept channel, each against the full context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodSharingPlan {
    pub passes: Vec<OodPass>,
    pub concat_order: Vec<String>,
}

impl OodSharingPlan {
    pub fn embedding_dim(&self, model_dim: usize) -> usize {
        self.passes.len() * model_dim
    }

    /// Grouped inputs for every pass, taken from a full stack laid out per
    /// `schema`.
    pub fn pass_inputs(&self, x: &Tensor, schema: &GroupSchema) -> Result<Vec<GroupedBatch>> {
        let full = split_groups(x, schema)?;
        let ctx_names = schema.context_names();
        let con_names = schema.concept_names();
        self.passes
            .iter()
            .map(|p| {
                let keep_ctx = p
                    .context
                    .iter()
                    .map(|n| position(&ctx_names, n))
                    .collect::<Result<Vec<_>>>()?;
                let con = position(&con_names, &p.concept)?;
                full.select_context(&keep_ctx)?.select_concept(&[con])
            })
            .collect()
    }
}

fn position(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Schema(format!("unknown channel `{name}`")))
}

pub fn build_ood_plan(target: &GroupSchema) -> OodSharingPlan {
    let context = target.context_names();
    let concepts = target.concept_names();
    OodSharingPlan {
        passes: concepts
            .iter()
            .map(|c| OodPass {
                context: context.clone(),
                concept: c.clone(),
            })
            .collect(),
        concat_order: concepts,
    }
}

/// Manifests for the two datasets the method is usually described with.
pub mod presets {
    use super::*;

    pub fn hpa() -> GroupSchema {
        GroupSchema::from_roles(&[
            ("Microtubules", Role::Context),
            ("Nucleus", Role::Context),
            ("ER", Role::Context),
            ("Protein", Role::Concept),
        ])
        .expect("valid preset")
    }

    pub fn jump_cp() -> GroupSchema {
        GroupSchema::from_roles(&[
            ("Nucleus", Role::Context),
            ("ER", Role::Context),
            ("RNA", Role::Concept),
            ("AGP", Role::Concept),
            ("Mito", Role::Concept),
        ])
        .expect("valid preset")
    }
}
