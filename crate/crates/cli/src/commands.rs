use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use c3r::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use c3r::dataset::{load_dataset, write_dataset, Dataset};
use c3r::encoder::{Backbone, ModelConfig};
use c3r::eval::{
    aggregate, cosine_diagnostic, embed_dataset, flip_retrieval, fov_embeddings, limited_context_sweep, median,
    retrieval_eval, select, split_of, train_probe, tuned_retrieval, well_embeddings, write_embeddings, CosineCurves,
    EmbedOptions, FlipResult, LabelMode, Level, RetrievalResult, Split, SweepRow, TunedRetrieval,
};
use c3r::mcd::trainer::{train, DistillationState, StepMetrics};
use c3r::schema::{build_ood_plan, GroupSchema};
use c3r::stats::{channel_stats, StatsReport, VitExtractor};
use c3r::synth::{generate, SynthConfig};
use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::{
    default_encoder, default_train, parse, read_table, resolve, to_toml, Ablation, AnalyzeFile, EmbedFile, EvalFile,
    GenFile, GenResolved, TrainFile, TrainResolved,
};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Flags shared by every experiment command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(format!("serializing report: {e}")))
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn required(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(file)
        .ok_or_else(|| CliError::Config(format!("`{name}` must be given with --{name} or in the config file")))
}

pub fn gen(common: &Common) -> CliResult<()> {
    let file: GenFile = parse(read_table(common.config.as_deref())?, "gen config")?;
    let mut synth: SynthConfig = resolve(&SynthConfig::default(), file.synth, "synth")?;
    if let Some(seed) = common.seed.or(file.seed) {
        synth.seed = seed;
    }
    synth.validate()?;
    let ds = generate(&synth)?;
    write_dataset(&ds, &common.out)?;
    let resolved = GenResolved { seed: synth.seed, synth };
    write_file(&common.out, CONFIG_FILE, to_toml(&resolved)?)?;
    write_file(&common.out, SCHEMA_FILE, ds.schema.to_manifest())?;
    log::info!("wrote {} samples to {}", ds.len(), common.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub parameter_count: usize,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

pub fn resolve_train(common: &Common, data_flag: Option<PathBuf>, ds: Option<&Dataset>) -> CliResult<(TrainResolved, Option<Dataset>)> {
    let file: TrainFile = parse(read_table(common.config.as_deref())?, "train config")?;
    let data = required(data_flag, file.data, "data")?;
    let loaded = match ds {
        Some(_) => None,
        None => Some(load_dataset(&data)?),
    };
    let ds = ds.or(loaded.as_ref()).expect("dataset present");
    let seed_override = common.seed.or(file.seed);
    let encoder = resolve(&default_encoder(ds.image_size), file.model, "model")?;
    let ablation: Ablation = resolve(&Ablation::default(), file.ablation, "ablation")?;
    let mut train_cfg = resolve(&default_train(ds.image_size, ds.schema.c1(), seed_override.unwrap_or(0)), file.train, "train")?;
    if let Some(seed) = seed_override {
        train_cfg.seed = seed;
    }
    let model = ablation.build(&encoder, &ds.schema)?;
    model.validate()?;
    train_cfg.drop = ablation.drop_policy(train_cfg.drop)?;
    train_cfg.validate(&model, &ds.schema)?;
    Ok((
        TrainResolved {
            seed: train_cfg.seed,
            data,
            ablation,
            encoder,
            model,
            train: train_cfg,
        },
        loaded,
    ))
}

pub fn train_cmd(common: &Common, data_flag: Option<PathBuf>) -> CliResult<()> {
    let (resolved, ds) = resolve_train(common, data_flag, None)?;
    let ds = ds.expect("loaded by resolve_train");
    let config_text = to_toml(&resolved)?;
    write_file(&common.out, CONFIG_FILE, &config_text)?;
    write_file(&common.out, SCHEMA_FILE, ds.schema.to_manifest())?;

    let cfg = &resolved.train;
    let mut state = DistillationState::new(&resolved.model, &ds.schema, &cfg.head, DType::F32, resolved.seed)?;
    let metrics_path = common.out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?);
    let start = Instant::now();
    let history = train(&mut state, &ds, cfg, |m: &StepMetrics| {
        let line = serde_json::to_string(m).map_err(|e| c3r::Error::Numeric(format!("metrics: {e}")))?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| c3r::Error::Numeric(format!("writing metrics: {e}")))?;
        if m.step % 10 == 0 || m.step + 1 == cfg.steps {
            log::info!("step {:>5}  loss {:.4}  lr {:.2e}", m.step, m.total, m.lr);
        }
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let provenance = Provenance {
        git_revision: git_revision(),
        seed: resolved.seed,
        step: state.step,
        config: Some(config_text),
    };
    save_checkpoint(&Checkpoint::from_state(&state, provenance)?, &common.out.join(CHECKPOINT_FILE))?;
    let summary = TrainSummary {
        parameter_count: resolved.model.parameter_count(),
        steps: history.len(),
        first_loss: history.first().map(|m| m.total),
        final_loss: history.last().map(|m| m.total),
        seconds,
    };
    write_file(&common.out, "summary.json", to_json(&summary)?)?;
    log::info!("trained {} steps in {seconds:.1}s", history.len());
    Ok(())
}

/// Teacher backbone of a checkpoint, checked against the dataset layout.
fn load_backbone(checkpoint: &Path, ds: &Dataset) -> CliResult<Backbone> {
    let ckpt = load_checkpoint(checkpoint)?;
    if matches!(ckpt.model, ModelConfig::Vit(_)) && ckpt.schema != ds.schema {
        return Err(CliError::Config(
            "a single-stem ViT checkpoint needs the exact channel layout it was trained on".into(),
        ));
    }
    if ckpt.model.image_size() != ds.image_size {
        log::warn!(
            "dataset images are {}px, the model was trained on {}px",
            ds.image_size,
            ckpt.model.image_size()
        );
    }
    Ok(ckpt.into_state()?.teacher.backbone)
}

fn pool(records: Vec<c3r::eval::EmbeddingRecord>, level: Level) -> CliResult<Vec<c3r::eval::EmbeddingRecord>> {
    Ok(match level {
        Level::Cell => records,
        Level::Fov => aggregate(&records, Level::Fov, LabelMode::Union)?,
        Level::Well => aggregate(&aggregate(&records, Level::Fov, LabelMode::Exact)?, Level::Well, LabelMode::Exact)?,
    })
}

pub struct EmbedFlags {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub drop: Vec<String>,
    pub flip: bool,
    pub level: Option<Level>,
}

pub fn embed_cmd(common: &Common, flags: EmbedFlags) -> CliResult<()> {
    let mut file: EmbedFile = parse(read_table(common.config.as_deref())?, "embed config")?;
    file.data = Some(required(flags.data, file.data, "data")?);
    file.checkpoint = Some(required(flags.checkpoint, file.checkpoint, "checkpoint")?);
    if !flags.drop.is_empty() {
        file.drop = flags.drop;
    }
    file.flip |= flags.flip;
    file.level = flags.level.unwrap_or(file.level);
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    let ds = load_dataset(file.data.as_deref().expect("set above"))?;
    let backbone = load_backbone(file.checkpoint.as_deref().expect("set above"), &ds)?;
    write_file(&common.out, CONFIG_FILE, to_toml(&file)?)?;
    write_file(&common.out, SCHEMA_FILE, ds.schema.to_manifest())?;
    let opts = EmbedOptions {
        drop: file.drop.clone(),
        flip: file.flip,
        plan: file.ood_plan.then(|| build_ood_plan(&ds.schema)),
        batch_size: Some(file.batch_size),
    };
    let records = pool(embed_dataset(&backbone, &ds, &opts)?, file.level)?;
    write_embeddings(&records, &common.out.join(EMBEDDINGS_FILE))?;
    log::info!("wrote {} {:?} embeddings", records.len(), file.level);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub full_map: f64,
    pub dropped: Option<DroppedProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedProbe {
    pub channels: Vec<String>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSection {
    pub raw: RetrievalResult,
    pub tuned: Option<TunedRetrieval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSection {
    pub curves: CosineCurves,
    pub median_intermediate: f64,
    pub median_final: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: Option<ProbeSection>,
    pub retrieval: Option<RetrievalSection>,
    pub flip: Option<FlipResult>,
    pub sweep: Option<Vec<SweepRow>>,
    pub diagnostic: Vec<DiagnosticSection>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.probe {
            s += &format!("probe mAP (FoV, test wells)   {:.4}\n", p.full_map);
            if let Some(d) = &p.dropped {
                s += &format!("probe mAP without {:<12} {:.4}\n", d.channels.join("+"), d.map);
            }
        }
        if let Some(r) = &self.retrieval {
            s += &format!("retrieval mAP (wells)         {:.4}  kNN@{} {:.4}\n", r.raw.map, r.raw.k, r.raw.knn_accuracy);
            if let Some(t) = &r.tuned {
                s += &format!(
                    "tuned retrieval {:?}/{:?}  mAP {:.4}  kNN {:.4}\n",
                    t.post.normalization, t.post.whitening, t.test.map, t.test.knn_accuracy
                );
            }
        }
        if let Some(f) = &self.flip {
            s += &format!("group flip mAP                {:.4} -> {:.4}\n", f.unflipped.map, f.flipped.map);
        }
        if let Some(rows) = &self.sweep {
            s += "limited context (probe mAP)\n";
            for r in rows {
                s += &format!("  {:<14} {:.4}\n", r.dropped.as_deref().map_or("all".to_string(), |d| format!("-{d}")), r.map);
            }
        }
        for d in &self.diagnostic {
            s += &format!(
                "cosine full vs sparse, drop {}: intermediate {:.4}  final {:.4} (medians)\n",
                d.curves.drop_count, d.median_intermediate, d.median_final
            );
        }
        s
    }

    /// One line-delimited record per scalar metric.
    pub fn metric_lines(&self) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        let mut push = |name: String, value: f64| out.push(serde_json::json!({ "metric": name, "value": value }));
        if let Some(p) = &self.probe {
            push("probe_map".into(), p.full_map);
            if let Some(d) = &p.dropped {
                push(format!("probe_map_without_{}", d.channels.join("+")), d.map);
            }
        }
        if let Some(r) = &self.retrieval {
            push("retrieval_map".into(), r.raw.map);
            push("knn_accuracy".into(), r.raw.knn_accuracy);
            if let Some(t) = &r.tuned {
                push("tuned_retrieval_map".into(), t.test.map);
            }
        }
        if let Some(f) = &self.flip {
            push("flip_unflipped_map".into(), f.unflipped.map);
            push("flip_flipped_map".into(), f.flipped.map);
        }
        for r in self.sweep.iter().flatten() {
            push(format!("sweep_map_{}", r.dropped.as_deref().unwrap_or("all")), r.map);
        }
        for d in &self.diagnostic {
            push(format!("cosine_intermediate_drop{}", d.curves.drop_count), d.median_intermediate);
            push(format!("cosine_final_drop{}", d.curves.drop_count), d.median_final);
        }
        out
    }
}

pub struct EvalFlags {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub drop: Vec<String>,
    pub flip: bool,
}

pub fn evaluate(backbone: &Backbone, ds: &Dataset, file: &EvalFile) -> CliResult<EvalReport> {
    if !backbone.channel_adaptive() && (file.flip || !file.drop.is_empty()) {
        return Err(CliError::Config("flip and drop need a grouped (cce) checkpoint".into()));
    }
    let mut report = EvalReport::default();
    let mut probe_cfg = file.probe.clone();
    probe_cfg.seed = file.seed;

    let full = fov_embeddings(backbone, ds, &EmbedOptions::default())?;
    let probe = train_probe(&select(&full, Split::Train), &select(&full, Split::Validation), &probe_cfg)?;
    let dropped = if file.drop.is_empty() {
        None
    } else {
        let sparse = fov_embeddings(backbone, ds, &EmbedOptions { drop: file.drop.clone(), ..Default::default() })?;
        Some(DroppedProbe {
            channels: file.drop.clone(),
            map: probe.evaluate(&select(&sparse, Split::Test))?.map,
        })
    };
    report.probe = Some(ProbeSection {
        full_map: probe.evaluate(&select(&full, Split::Test))?.map,
        dropped,
    });

    if file.retrieval {
        let wells = well_embeddings(backbone, ds, &EmbedOptions::default())?;
        let raw = retrieval_eval(&wells, file.k)?;
        let tuned = match tuned_retrieval(&wells, |r| split_of(r) == Split::Validation, file.k) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("post-processing search skipped: {e}");
                None
            }
        };
        report.retrieval = Some(RetrievalSection { raw, tuned });
    }

    if backbone.channel_adaptive() {
        if file.flip {
            report.flip = Some(flip_retrieval(backbone, ds, file.k)?);
        }
        if file.sweep {
            report.sweep = Some(limited_context_sweep(backbone, ds, &probe_cfg)?);
        }
        if file.diagnostic {
            let n = file.diagnostic_samples.min(ds.len());
            let samples: Vec<usize> = (0..n).map(|i| i * ds.len() / n.max(1)).collect();
            let encoder = backbone.as_cce().expect("channel-adaptive backbones are grouped");
            for c in 1..ds.schema.c1() {
                let curves = cosine_diagnostic(encoder, ds, &samples, c)?;
                report.diagnostic.push(DiagnosticSection {
                    median_intermediate: median(&curves.intermediate),
                    median_final: median(&curves.final_cls),
                    curves,
                });
            }
        }
    }
    Ok(report)
}

pub fn eval_cmd(common: &Common, flags: EvalFlags) -> CliResult<()> {
    let mut file: EvalFile = parse(read_table(common.config.as_deref())?, "eval config")?;
    file.data = Some(required(flags.data, file.data, "data")?);
    file.checkpoint = Some(required(flags.checkpoint, file.checkpoint, "checkpoint")?);
    if !flags.drop.is_empty() {
        file.drop = flags.drop;
    }
    file.flip |= flags.flip;
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    file.probe.validate()?;
    let ds = load_dataset(file.data.as_deref().expect("set above"))?;
    // reject unknown or concept channels before any work
    c3r::eval::context_positions(&ds.schema, &file.drop).map_err(|e| CliError::Config(e.to_string()))?;
    let backbone = load_backbone(file.checkpoint.as_deref().expect("set above"), &ds)?;
    write_file(&common.out, CONFIG_FILE, to_toml(&file)?)?;
    write_file(&common.out, SCHEMA_FILE, ds.schema.to_manifest())?;

    let report = evaluate(&backbone, &ds, &file)?;
    write_file(&common.out, REPORT_JSON, to_json(&report)?)?;
    let text = report.to_text();
    write_file(&common.out, REPORT_TXT, &text)?;
    let lines: String = report.metric_lines().iter().map(|v| format!("{v}\n")).collect();
    write_file(&common.out, METRICS_FILE, lines)?;
    print!("{text}");
    Ok(())
}

pub fn analyze_cmd(common: &Common, data_flag: Option<PathBuf>, write_manifest: bool) -> CliResult<()> {
    let mut file: AnalyzeFile = parse(read_table(common.config.as_deref())?, "analyze config")?;
    file.data = Some(required(data_flag, file.data, "data")?);
    file.write_manifest |= write_manifest;
    if let Some(seed) = common.seed {
        file.seed = seed;
        file.stats.seed = seed;
        file.extractor.seed = seed;
    }
    let ds = load_dataset(file.data.as_deref().expect("set above"))?;
    let mut vit = VitExtractor::default_config(ds.image_size);
    vit.embed_dim = file.extractor.embed_dim;
    vit.depth = file.extractor.depth;
    vit.heads = file.extractor.heads;
    if let Some(p) = file.extractor.patch_size {
        vit.patch_size = p;
    }
    let extractor = VitExtractor::random(&vit, file.extractor.seed)?;
    write_file(&common.out, CONFIG_FILE, to_toml(&file)?)?;
    write_file(&common.out, SCHEMA_FILE, ds.schema.to_manifest())?;
    let report = channel_stats(&ds, &extractor, &file.stats)?;
    write_file(&common.out, REPORT_JSON, to_json(&report)?)?;
    let text = report.to_table();
    write_file(&common.out, REPORT_TXT, &text)?;
    if file.write_manifest {
        let schema: GroupSchema = report.suggested_schema()?;
        write_file(&common.out, "suggested_manifest.toml", schema.to_manifest())?;
    }
    print!("{text}");
    Ok(())
}

/// Parsed content of a file handed to `plot`.
pub enum PlotInput {
    Training(Vec<StepMetrics>),
    Eval(EvalReport),
    Stats(StatsReport),
}

pub fn read_plot_input(path: &Path) -> CliResult<PlotInput> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |what: &str, e: serde_json::Error| CliError::Config(format!("{}: not a {what}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "jsonl") {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<StepMetrics>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad("training metrics stream", e))?;
        return Ok(PlotInput::Training(steps));
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad("JSON report", e))?;
    if value.get("channels").is_some() {
        return Ok(PlotInput::Stats(serde_json::from_value(value).map_err(|e| bad("channel report", e))?));
    }
    Ok(PlotInput::Eval(serde_json::from_value(value).map_err(|e| bad("evaluation report", e))?))
}

pub fn plot_cmd(out: &Path, files: &[PathBuf]) -> CliResult<()> {
    if files.is_empty() {
        return Err(CliError::Config("plot needs at least one metrics or report file".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let written = match read_plot_input(path)? {
            PlotInput::Training(steps) => vec![crate::plot::training_curves(&steps, &out.join(format!("{stem}_loss.svg")))?],
            PlotInput::Stats(report) => vec![crate::plot::parity_bars(&report, &out.join(format!("{stem}_parity.svg")))?],
            PlotInput::Eval(report) => crate::plot::eval_figures(&report, out, stem)?,
        };
        for w in written {
            log::info!("wrote {}", w.display());
        }
    }
    Ok(())
}
