//! `icl-lens` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::CaptionDataset;
use crate::attention_metrics::Metric;
use crate::config::{LoadedConfig, MetricToggles};
use crate::efficiency::{anchor_mask, context_mask, kv_estimate, prune_plan, ModelCfg, PrunePlan};
use crate::error::Error;
use crate::interchange::{load_run, write_atomic, DType, ModelInfo, RunBundle, Sample, Variant};
use crate::report::{
    attention_report, build_demos, load_captions, long_rows, query_seed, score, BuildRequest, DemoSet, ScoreInputs,
    SCORE_COLUMNS,
};
use crate::retrieval::EmbeddingTable;
use crate::segmentation::TokenSegmentation;
use crate::synth::{gen_attention, Strength, SynthSpec};
use crate::text_metrics::ChairLexicon;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const CONFIG_ECHO: &str = "config.echo.json";

#[derive(Debug, Parser)]
#[command(name = "icl-lens", version, about = "Demonstration building, caption scoring and attention analysis")]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Retrieve examples, assign captions and render one sequence per query.
    Build,
    /// Score generated captions against a demonstration set.
    Score {
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Per-layer ACAR / IEAR / VCAR over a run directory.
    Attn {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
    },
    /// Emit a mask or prune plan with a KV-cache summary.
    Plan(PlanArgs),
    /// Write a synthetic run directory from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Load and cross-check a run directory and/or a config.
    Validate {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanKind {
    Anchor,
    Context,
    Prune,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_enum)]
    pub kind: PlanKind,
    /// Segmentation file; required for masks.
    #[arg(long)]
    pub seg: Option<PathBuf>,
    /// Prompt length, when pruning without a segmentation.
    #[arg(long, requires = "kept", conflicts_with = "seg")]
    pub full_len: Option<usize>,
    /// Retained token count, when pruning without a segmentation.
    #[arg(long, requires = "full_len")]
    pub kept: Option<usize>,
    /// Inclusive mask layer range `a:b`.
    #[arg(long)]
    pub layers: Option<String>,
    /// First pruned layer.
    #[arg(long)]
    pub k: Option<usize>,
    /// Prediction layer (defaults to the layer count).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub recover: bool,
    #[arg(long, default_value_t = 32)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_bytes: usize,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(format!("invalid configuration: {msg}")),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything a command reports besides its files.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub warnings: Vec<String>,
}

/// Parses `args` and runs the command, printing output and warnings.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::Build => cmd_build(cli),
        Command::Score { captions, demos } => cmd_score(cli, captions.as_deref(), demos.as_deref()),
        Command::Attn { run, metrics } => cmd_attn(cli, run.as_deref(), metrics),
        Command::Plan(args) => cmd_plan(cli, args),
        Command::Synth { spec } => cmd_synth(cli, spec),
        Command::Validate { run } => cmd_validate(cli, run.as_deref()),
    }
}

fn load_config(cli: &Cli) -> CliResult<Option<LoadedConfig>> {
    match &cli.config {
        None => Ok(None),
        Some(path) => {
            let loaded = LoadedConfig::load(path).map_err(|e| match e {
                Error::Io { .. } | Error::Json { .. } => CliError::Usage(e.to_string()),
                other => other.into(),
            })?;
            loaded.validate()?;
            Ok(Some(loaded))
        }
    }
}

fn require_config(cli: &Cli) -> CliResult<LoadedConfig> {
    load_config(cli)?.ok_or_else(|| CliError::Usage("this command needs --config".into()))
}

fn out_dir(cli: &Cli, cfg: Option<&LoadedConfig>) -> CliResult<PathBuf> {
    let dir = match (&cli.out, cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => match &c.config.paths.out {
            Some(p) => c.resolve(p),
            None => return Err(CliError::Usage("no output directory: pass --out or set paths.out".into())),
        },
        (None, None) => return Err(CliError::Usage("no output directory: pass --out".into())),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(Error::Io { path: dir.clone(), source: e }))?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    Ok(write_atomic(&dir.join(name), bytes)?)
}

fn to_csv<S: Serialize>(rows: &[S]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn to_csv_with_header<S: Serialize>(header: &[&str], rows: &[S]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Internal(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn pretty<S: Serialize>(value: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn load_table(cfg: &LoadedConfig, files: &Option<crate::interchange::EmbeddingFiles>) -> CliResult<Option<EmbeddingTable>> {
    match files {
        None => Ok(None),
        Some(f) => {
            let (t, i) = cfg.embedding_paths(f);
            Ok(Some(EmbeddingTable::load(&t, &i)?))
        }
    }
}

fn cmd_build(cli: &Cli) -> CliResult<Outcome> {
    let cfg = require_config(cli)?;
    let c = &cfg.config;
    let ds = CaptionDataset::load(&cfg.require("dataset", &c.paths.dataset)?)?;
    let table = load_table(&cfg, &c.paths.embeddings)?;
    let queries = c.queries.clone().unwrap_or_else(|| ds.ids());
    let req = BuildRequest {
        method: c.retrieval,
        source: c.caption_source,
        shots: c.shots,
        seed: cli.seed.unwrap_or(c.seed),
        queries: &queries,
        template: &c.template,
    };
    let demos = build_demos(&req, &ds, table.as_ref())?;
    let dir = out_dir(cli, Some(&cfg))?;
    let mut json = demos.to_json();
    json.push('\n');
    write_file(&dir, "demos.json", json.as_bytes())?;
    write_file(&dir, CONFIG_ECHO, &cfg.raw)?;
    Ok(Outcome {
        stdout: format!("wrote {} sequences to {}\n", demos.entries.len(), dir.join("demos.json").display()),
        warnings: Vec::new(),
    })
}

fn cmd_score(cli: &Cli, captions: Option<&Path>, demos: Option<&Path>) -> CliResult<Outcome> {
    let cfg = require_config(cli)?;
    let c = &cfg.config;
    let ds = CaptionDataset::load(&cfg.require("dataset", &c.paths.dataset)?)?;
    let demos_path = match demos {
        Some(p) => p.to_path_buf(),
        None => cfg.require("demos", &c.paths.demos)?,
    };
    let captions_path = match captions {
        Some(p) => p.to_path_buf(),
        None => cfg.require("captions", &c.paths.captions)?,
    };
    let demo_set = DemoSet::load(&demos_path)?;
    let generated = load_captions(&captions_path)?;
    let lexicon = match &c.paths.lexicon {
        Some(p) => Some(ChairLexicon::load(&cfg.resolve(p))?),
        None => None,
    };
    let images = load_table(&cfg, &c.paths.embeddings)?;
    let caption_embs = load_table(&cfg, &c.paths.caption_embeddings)?;
    let report = score(&ScoreInputs {
        demos: &demo_set,
        captions: &generated,
        dataset: &ds,
        lexicon: lexicon.as_ref(),
        image_embeddings: images.as_ref(),
        caption_embeddings: caption_embs.as_ref(),
        toggles: &c.metrics,
    })?;

    let dir = out_dir(cli, Some(&cfg))?;
    write_file(&dir, "scores.csv", &to_csv_with_header(&SCORE_COLUMNS, &report.rows)?)?;
    let long: Vec<_> = long_rows(&report.rows);
    write_file(&dir, "metrics.csv", &to_csv_with_header(&["sample_id", "metric", "value"], &long)?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        aggregates: &'a crate::report::ScoreAggregates,
        warnings: &'a [String],
        config_echo: &'a str,
    }
    write_file(
        &dir,
        "summary.json",
        &pretty(&Summary {
            aggregates: &report.aggregates,
            warnings: &report.warnings,
            config_echo: CONFIG_ECHO,
        }),
    )?;
    write_file(&dir, CONFIG_ECHO, &cfg.raw)?;

    let a = &report.aggregates;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
    Ok(Outcome {
        stdout: format!(
            "samples {}\ncider {}\nclipscore {}\nchair_i {}\nchair_s {}\nshortcut_cider {}\n",
            a.n_samples,
            fmt(a.cider),
            fmt(a.clipscore),
            fmt(a.chair_i),
            fmt(a.chair_s),
            fmt(a.shortcut_cider)
        ),
        warnings: report.warnings,
    })
}

fn cmd_attn(cli: &Cli, run: Option<&Path>, metrics: &[Metric]) -> CliResult<Outcome> {
    let cfg = load_config(cli)?;
    let run_path = match (run, &cfg) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => c.require("run", &c.config.paths.run)?,
        (None, None) => return Err(CliError::Usage("attn needs --run or a config with paths.run".into())),
    };
    let metrics: Vec<Metric> = if !metrics.is_empty() {
        metrics.to_vec()
    } else {
        cfg.as_ref()
            .map_or_else(|| MetricToggles::default().attention, |c| c.config.metrics.attention.clone())
    };
    let bundle = load_run(&run_path)?;
    let report = attention_report(&bundle, &metrics)?;
    let dir = out_dir(cli, cfg.as_ref())?;

    #[derive(Serialize)]
    struct LayerCsv {
        layer: usize,
        metric: Metric,
        value: f64,
        sentinel_flag: bool,
    }
    let layer_rows: Vec<LayerCsv> = report
        .layers
        .iter()
        .map(|r| LayerCsv {
            layer: r.layer,
            metric: r.metric,
            value: r.value,
            sentinel_flag: r.sentinel_flag,
        })
        .collect();
    write_file(
        &dir,
        "attention.csv",
        &to_csv_with_header(&["layer", "metric", "value", "sentinel_flag"], &layer_rows)?,
    )?;
    write_file(
        &dir,
        "attention_samples.csv",
        &to_csv_with_header(&["sample_id", "layer", "metric", "value", "sentinel_flag"], &report.samples)?,
    )?;
    #[derive(Serialize)]
    struct MeanCsv {
        metric: Metric,
        mean: Option<f64>,
        sentinel_layers: String,
    }
    let means: Vec<MeanCsv> = report
        .means
        .iter()
        .map(|m| MeanCsv {
            metric: m.metric,
            mean: m.mean,
            sentinel_layers: m.sentinel_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
        })
        .collect();
    write_file(&dir, "attention_means.csv", &to_csv(&means)?)?;
    write_file(&dir, "attention_summary.json", &pretty(&report))?;
    if let Some(c) = &cfg {
        write_file(&dir, CONFIG_ECHO, &c.raw)?;
    }

    let mut stdout = String::new();
    for m in &report.means {
        stdout.push_str(&format!(
            "{} mean {}\n",
            m.metric,
            m.mean.map_or_else(|| "sentinel".to_owned(), |v| format!("{v:.6}"))
        ));
    }
    Ok(Outcome {
        stdout,
        warnings: report.warnings,
    })
}

fn parse_range(text: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--layers expects `a:b`, got `{text}`"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[derive(Serialize)]
struct KvRow {
    layer: usize,
    effective_len: usize,
    bytes: u64,
}

#[derive(Serialize)]
struct KvSummary {
    model: ModelCfg,
    full_len: usize,
    kept_len: usize,
    baseline_bytes: u64,
    bytes: u64,
    savings: f64,
    plan_file: String,
    plan_hash: String,
    note: &'static str,
}

fn cmd_plan(cli: &Cli, a: &PlanArgs) -> CliResult<Outcome> {
    let model = ModelCfg::new(a.n_layers, a.n_heads, a.head_dim, a.kv_bytes)?;
    let seg = a.seg.as_deref().map(TokenSegmentation::load).transpose()?;
    let dir = out_dir(cli, None)?;
    let mut stdout = String::new();

    match a.kind {
        PlanKind::Anchor | PlanKind::Context => {
            let seg = seg.ok_or_else(|| CliError::Usage("mask plans need --seg".into()))?;
            let range = a.layers.as_deref().ok_or_else(|| CliError::Usage("mask plans need --layers a:b".into()))?;
            let (start, end) = parse_range(range)?;
            let plan = if a.kind == PlanKind::Anchor {
                anchor_mask(&seg, start, end, model.n_layers)?
            } else {
                context_mask(&seg, start, end, model.n_layers)?
            };
            let stem = format!("{}_mask", plan.kind);
            plan.save(&seg, &dir, &stem)?;
            let allowed = (0..seg.len())
                .flat_map(|q| (0..=q).map(move |k| (q, k)))
                .filter(|&(q, k)| plan.allows(start, q, k))
                .count();
            stdout.push_str(&format!(
                "{} over layers {start}..={end}: {allowed} of {} causal pairs allowed per masked layer\n",
                plan.kind,
                seg.len() * (seg.len() + 1) / 2
            ));
            stdout.push_str(&format!("wrote {}\n", dir.join(format!("{stem}.iclt")).display()));
        }
        PlanKind::Prune => {
            let k = a.k.ok_or_else(|| CliError::Usage("prune plans need --k".into()))?;
            let p = a.p.unwrap_or(model.n_layers);
            let plan = match (&seg, a.full_len, a.kept) {
                (Some(seg), _, _) => prune_plan(seg, k, a.recover, p, model.n_layers)?,
                (None, Some(full), Some(kept)) => PrunePlan::from_lengths(full, kept, k, p, a.recover, model.n_layers)?,
                _ => return Err(CliError::Usage("prune plans need --seg or --full-len with --kept".into())),
            };
            let est = kv_estimate(&model, Some(&plan), plan.full_len)?;
            let plan_json = pretty(&plan);
            write_file(&dir, "prune_plan.json", &plan_json)?;
            let per = model.bytes_per_token_layer();
            let rows: Vec<KvRow> = plan
                .effective_lengths
                .iter()
                .enumerate()
                .map(|(layer, &len)| KvRow {
                    layer,
                    effective_len: len,
                    bytes: per * len as u64,
                })
                .collect();
            write_file(&dir, "kv_layers.csv", &to_csv(&rows)?)?;
            let summary = KvSummary {
                model,
                full_len: plan.full_len,
                kept_len: plan.kept_len,
                baseline_bytes: est.baseline_bytes,
                bytes: est.bytes,
                savings: est.savings,
                plan_file: "prune_plan.json".into(),
                plan_hash: format!("{:x}", Sha256::digest(&plan_json)),
                note: "decoder self-attention layers only; prompt tokens only",
            };
            write_file(&dir, "kv_summary.json", &pretty(&summary))?;

            stdout.push_str("layer  effective_len  bytes\n");
            for r in &rows {
                stdout.push_str(&format!("{:>5}  {:>13}  {}\n", r.layer, r.effective_len, r.bytes));
            }
            stdout.push_str(&format!(
                "baseline bytes {}\nplan bytes {}\nsavings {:.4}\n",
                est.baseline_bytes, est.bytes, est.savings
            ));
        }
    }
    Ok(Outcome {
        stdout,
        warnings: Vec::new(),
    })
}

/// Synthetic run description accepted by `synth`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default)]
    pub context_lengths: Option<Vec<usize>>,
    #[serde(default)]
    pub segmentation: Option<PathBuf>,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub anchor_strength: Strength,
    #[serde(default)]
    pub window_strength: Strength,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub query_strength: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default = "both_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub dtype: SynthDType,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_kv_bytes")]
    pub kv_bytes_per_element: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDType {
    #[default]
    F32,
    F16,
}

fn one() -> usize {
    1
}

fn both_variants() -> Vec<Variant> {
    vec![Variant::WithQueryImage, Variant::WithoutQueryImage]
}

fn default_head_dim() -> usize {
    64
}

fn default_kv_bytes() -> usize {
    2
}

fn cmd_synth(cli: &Cli, spec_path: &Path) -> CliResult<Outcome> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::Io {
        path: spec_path.to_path_buf(),
        source: e,
    })?;
    let file: SynthFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: spec_path.to_path_buf(),
        source: e,
    })?;
    let seg = match (&file.context_lengths, &file.segmentation) {
        (Some(lengths), None) => TokenSegmentation::from_context_lengths(lengths),
        (None, Some(p)) => {
            let p = if p.is_absolute() {
                p.clone()
            } else {
                spec_path.parent().unwrap_or(Path::new("")).join(p)
            };
            TokenSegmentation::load(&p)?
        }
        _ => {
            return Err(CliError::Usage(
                "synth spec needs exactly one of context_lengths and segmentation".into(),
            ))
        }
    };
    if file.samples == 0 || file.variants.is_empty() {
        return Err(CliError::Usage("synth spec needs at least one sample and one variant".into()));
    }
    let base_seed = cli.seed.unwrap_or(file.seed);
    let mut bundle = RunBundle::new(ModelInfo {
        name: "synthetic".into(),
        n_layers: file.n_layers,
        n_heads: file.n_heads,
        head_dim: file.head_dim,
        kv_bytes_per_element: file.kv_bytes_per_element,
        generation: None,
        layer_indexing: Some("synthetic layers 0..n_layers".into()),
        plan_hash: None,
    });
    for i in 0..file.samples {
        let spec = SynthSpec {
            seg: seg.clone(),
            n_layers: file.n_layers,
            n_heads: file.n_heads,
            anchor_strength: file.anchor_strength.clone(),
            window_strength: file.window_strength.clone(),
            noise: file.noise,
            query_strength: file.query_strength,
            seed: query_seed(base_seed, i),
        };
        let sample_id = format!("synth-{i:05}");
        let mut records = std::collections::BTreeMap::new();
        for &v in &file.variants {
            let rec = gen_attention(&spec, v)?;
            let rec = crate::interchange::AttentionRecord::new(sample_id.clone(), v, rec.to_tensor())?;
            records.insert(v, rec);
        }
        bundle.samples.push(Sample {
            sample_id,
            segmentation: seg.clone(),
            records,
            generated_caption: None,
        });
    }
    let dir = out_dir(cli, None)?;
    let dtype = match file.dtype {
        SynthDType::F32 => DType::F32,
        SynthDType::F16 => DType::F16,
    };
    bundle.save(&dir, dtype)?;
    Ok(Outcome {
        stdout: format!("wrote {} synthetic samples to {}\n", file.samples, dir.display()),
        warnings: Vec::new(),
    })
}

fn cmd_validate(cli: &Cli, run: Option<&Path>) -> CliResult<Outcome> {
    let cfg = load_config(cli)?;
    let run_path = run
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().and_then(|c| c.config.paths.run.as_ref().map(|p| c.resolve(p))));
    let mut stdout = String::new();
    if cfg.is_some() {
        stdout.push_str("config ok\n");
    }
    let mut warnings = Vec::new();
    match run_path {
        Some(p) => {
            let bundle = load_run(&p)?;
            let variants: usize = bundle.samples.iter().map(|s| s.records.len()).sum();
            stdout.push_str(&format!(
                "run ok: {} samples, {} attention records, {} layers x {} heads, {} embedding tables\n",
                bundle.samples.len(),
                variants,
                bundle.model.n_layers,
                bundle.model.n_heads,
                bundle.embeddings.len()
            ));
            warnings = bundle.warnings;
        }
        None if cfg.is_none() => return Err(CliError::Usage("validate needs --run or --config".into())),
        None => {}
    }
    Ok(Outcome { stdout, warnings })
}
