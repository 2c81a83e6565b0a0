//! Per-command TOML configuration. Sections are overlaid on defaults, then
//! deserialized strictly so a misspelt key is an error.

use std::path::{Path, PathBuf};

use c3r::encoder::{Aggregation, EncoderConfig, ModelConfig, VitConfig};
use c3r::eval::{Level, ProbeConfig};
use c3r::mcd::channel_drop::DropPolicy;
use c3r::mcd::trainer::TrainConfig;
use c3r::schema::GroupSchema;
use c3r::stats::StatsConfig;
use c3r::synth::SynthConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn read_table(path: Option<&Path>) -> CliResult<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Deserialize a whole file strictly.
pub fn parse<T: DeserializeOwned>(table: toml::Table, what: &str) -> CliResult<T> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

/// Recursive overlay; a table carrying a `mode` tag replaces the default
/// outright so fields of another variant do not leak in.
fn overlay(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) if !o.contains_key("mode") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` with the user section laid over it.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, section: Option<toml::Value>, name: &str) -> CliResult<T> {
    let mut base = toml::Value::try_from(defaults).map_err(|e| CliError::Config(format!("[{name}] defaults: {e}")))?;
    if let Some(over) = section {
        if !over.is_table() {
            return Err(CliError::Config(format!("[{name}] must be a table")));
        }
        overlay(&mut base, over);
    }
    T::deserialize(base).map_err(|e| CliError::Config(format!("[{name}] {e}")))
}

pub fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string_pretty(value).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFile {
    pub seed: Option<u64>,
    pub synth: Option<toml::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenResolved {
    pub seed: u64,
    pub synth: SynthConfig,
}

/// Component switches matching the ablation rows: baseline, +GC, +GC+B,
/// +GC+IN+B, +GC+IN+B+MCD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Separate context and concept stems (off: one ViT stem over all
    /// channels).
    pub grouped_stem: bool,
    pub instance_norm: bool,
    /// Group-specific encoder branches (off: the branch layers move to the
    /// shared trunk).
    pub branches: bool,
    /// Masked context distillation (off: no channel dropping).
    pub mcd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            grouped_stem: true,
            instance_norm: true,
            branches: true,
            mcd: true,
        }
    }
}

impl Ablation {
    pub fn build(&self, encoder: &EncoderConfig, schema: &GroupSchema) -> CliResult<ModelConfig> {
        if !self.grouped_stem && (self.branches || self.mcd) {
            return Err(CliError::Config(
                "[ablation] branches and mcd need grouped_stem = true".into(),
            ));
        }
        let depth = encoder.branch_depth + encoder.shared_depth;
        if !self.grouped_stem {
            let mut vit = VitConfig::baseline_for(encoder, schema.n_channels(), depth);
            vit.instance_norm = self.instance_norm;
            return Ok(ModelConfig::Vit(vit));
        }
        let mut cce = encoder.clone();
        cce.instance_norm = self.instance_norm;
        if !self.branches {
            cce.branch_depth = 0;
            cce.shared_depth = depth;
        }
        Ok(ModelConfig::Cce(cce))
    }

    pub fn drop_policy(&self, configured: DropPolicy) -> CliResult<DropPolicy> {
        match (self.mcd, configured.is_active()) {
            (false, _) => Ok(DropPolicy::None),
            (true, true) => Ok(configured),
            (true, false) => Err(CliError::Config(
                "[ablation] mcd = true needs an active [train.drop] policy".into(),
            )),
        }
    }
}

pub fn default_encoder(image_size: usize) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        branch_depth: 1,
        shared_depth: 2,
        heads: 4,
        aggregation: Aggregation::Post,
        mlp_ratio: 4.0,
        flip_groups: false,
        patch_size: if image_size % 8 == 0 { 8 } else { image_size },
        image_size,
        instance_norm: true,
    }
}

pub fn default_train(image_size: usize, c1: usize, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::toy(image_size);
    t.seed = seed;
    t.head.hidden_dim = 64;
    t.head.bottleneck_dim = 32;
    t.head.prototypes = 64;
    t.drop = if c1 > 1 {
        DropPolicy::UniformStudent { max_c: (c1 - 1).min(2) }
    } else {
        DropPolicy::None
    };
    t
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub model: Option<toml::Value>,
    pub ablation: Option<toml::Value>,
    pub train: Option<toml::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResolved {
    pub seed: u64,
    pub data: PathBuf,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedFile {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Context channels removed at inference.
    pub drop: Vec<String>,
    pub flip: bool,
    /// One pass per concept channel, concatenated.
    pub ood_plan: bool,
    pub level: Level,
    pub batch_size: usize,
}

impl Default for EmbedFile {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            checkpoint: None,
            drop: Vec::new(),
            flip: false,
            ood_plan: false,
            level: Level::Cell,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Context channels removed for the limited-context probe.
    pub drop: Vec<String>,
    pub flip: bool,
    pub k: usize,
    pub probe: ProbeConfig,
    pub retrieval: bool,
    pub sweep: bool,
    pub diagnostic: bool,
    pub diagnostic_samples: usize,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            checkpoint: None,
            drop: Vec::new(),
            flip: false,
            k: c3r::eval::retrieval::DEFAULT_K,
            probe: ProbeConfig::default(),
            retrieval: true,
            sweep: true,
            diagnostic: true,
            diagnostic_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeFile {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub stats: StatsConfig,
    pub extractor: ExtractorConfig,
    pub write_manifest: bool,
}

impl Default for AnalyzeFile {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            stats: StatsConfig::default(),
            extractor: ExtractorConfig::default(),
            write_manifest: false,
        }
    }
}

/// Frozen 3-channel ViT used for channel features; weights are seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Defaults to 8 when it divides the image size.
    pub patch_size: Option<usize>,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            patch_size: None,
            seed: 0,
        }
    }
}
