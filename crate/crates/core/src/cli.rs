//! The `neoc` command line. One subcommand per pipeline stage, configured by
//! a JSON file plus `--dotted.key=value` overrides.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Every run writes
//! `config.json` (the effective config), `<subcommand>.result.json` and
//! `<subcommand>.log` into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::corpus::{
    curate, generate_synthetic_corpus, manifest_from_taxonomy, stratified_split, CorpusError, CorpusManifest,
    CurationRules, DirSource, ImageSource, MemorySource, SplitDescriptor, SplitParams, SynthSpec,
};
use crate::detect::{
    annotations_from_manifest, detect_objects, evaluate_detections, regions_to_jsonl, DetectError, DetectParams,
    ImageRegions,
};
use crate::eval::{evaluate, predictions_to_jsonl, EvalError, MetricsReport};
use crate::model::{checkpoint_digest, save_checkpoint, ArchitectureConfig, Model, ModelError};
use crate::taxonomy::{load_taxonomy_from_folders, ClassId, Taxonomy, TaxonomyError};
use crate::tensor::gradcheck::{run_suite, DEFAULT_EPS};
use crate::tensor::{Precision, Real};
use crate::trainer::{finetune, train_from_scratch, Dataset, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

macro_rules! domain_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        })*
    };
}

domain_errors!(
    CorpusError,
    ModelError,
    TrainError,
    EvalError,
    DetectError,
    TaxonomyError,
    std::io::Error,
    serde_json::Error
);

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    /// Build a manifest and taxonomy from a folder tree of PPM images.
    Ingest,
    /// Generate a synthetic glyph corpus.
    Synth,
    /// Drop partial views, split multi-object images, mask neighbours.
    Curate,
    /// Stratified train/test split with non-computable classes reported.
    Split,
    /// Train a model from scratch.
    Pretrain,
    /// Replace the head of a checkpoint and train on a target corpus.
    Finetune,
    /// Score a checkpoint on a test manifest.
    Eval,
    /// Sliding-window detection with the whole-image classifier.
    Detect,
    /// Finite-difference gradient checks of every layer.
    Gradcheck,
    /// Print the metrics report of an earlier eval.
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Ingest => "ingest",
            Subcommand::Synth => "synth",
            Subcommand::Curate => "curate",
            Subcommand::Split => "split",
            Subcommand::Pretrain => "pretrain",
            Subcommand::Finetune => "finetune",
            Subcommand::Eval => "eval",
            Subcommand::Detect => "detect",
            Subcommand::Gradcheck => "gradcheck",
            Subcommand::Report => "report",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "neoc",
    about = "Artifact image classification pipeline",
    after_help = "Any config key can be overridden with --dotted.path=value, e.g. --split.seed=7 or --train.epochs=5."
)]
struct Args {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; falls back to NEOC_THREADS, then 1.
    #[arg(long)]
    threads: Option<usize>,
    /// Only write the log file, not stderr.
    #[arg(long)]
    quiet: bool,
    #[arg(value_enum)]
    subcommand: Subcommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub seed: u64,
    pub spec: SynthSpec,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            seed: 42,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Also score after rolling classes up to this taxonomy depth.
    pub rollup_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSettings {
    pub params: DetectParams,
    /// IoU needed to match an annotated region.
    pub match_iou: f64,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self {
            params: DetectParams::default(),
            match_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSettings {
    pub seeds: u64,
    pub eps: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            seeds: 20,
            eps: DEFAULT_EPS,
        }
    }
}

/// Everything a subcommand may read. Paths are relative to the working
/// directory; manifest image paths are relative to `corpus_root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus_root: PathBuf,
    pub output_dir: PathBuf,
    /// Input manifest for curate, split and detect; defaults to
    /// `<corpus_root>/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `split.json` written by the split subcommand, read by eval.
    pub split_info: Option<PathBuf>,
    /// Metrics file read by report; defaults to `<output_dir>/metrics.json`.
    pub metrics: Option<PathBuf>,
    /// `num_classes` is taken from the training manifest.
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub split: SplitParams,
    pub curation: CurationRules,
    pub detect: DetectSettings,
    pub synth: SynthSettings,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_root: PathBuf::from("."),
            output_dir: PathBuf::from("out"),
            manifest: None,
            train_manifest: None,
            test_manifest: None,
            taxonomy: None,
            checkpoint: None,
            split_info: None,
            metrics: None,
            arch: ArchitectureConfig::desk_default(2),
            train: TrainConfig::default(),
            split: SplitParams::default(),
            curation: CurationRules::default(),
            detect: DetectSettings::default(),
            synth: SynthSettings::default(),
            eval: EvalSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

impl PipelineConfig {
    fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.corpus_root.join("manifest.jsonl"))
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    let path = value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("config key `{key}` is required for this subcommand")))?;
    if !path.exists() {
        return Err(CliError::Usage(format!("{key}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn existing(path: &Path, key: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{key}: {} does not exist", path.display())))
    }
}

fn keys_of(value: &Value) -> String {
    match value {
        Value::Object(m) => m.keys().cloned().collect::<Vec<_>>().join(", "),
        _ => String::new(),
    }
}

/// Rejects keys of `given` that the defaults do not have. Anything under a
/// `null` default is left to deserialization.
fn check_keys(given: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(g), Value::Object(d)) = (given, defaults) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                None => {
                    return Err(CliError::Usage(format!(
                        "unknown config key `{path}`; valid keys here: {}",
                        keys_of(defaults)
                    )))
                }
                Some(dv) => check_keys(v, dv, &path)?,
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `dotted.key` in `config`. The key must exist in `defaults`, except
/// below a key whose default is `null`.
fn apply_override(config: &mut Value, defaults: &Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = config;
    let mut schema = Some(defaults);
    for (i, part) in parts.iter().enumerate() {
        if let Some(s) = schema {
            if !s.is_null() {
                if s.get(part).is_none() {
                    let prefix = parts[..i].join(".");
                    let at = if prefix.is_empty() { "top level".into() } else { format!("`{prefix}`") };
                    return Err(CliError::Usage(format!(
                        "unknown config key `{key}`; valid keys at {at}: {}",
                        keys_of(s)
                    )));
                }
            }
        }
        schema = schema.and_then(|s| s.get(part));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("config key `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Builds the effective config from defaults, an optional file and overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let defaults = serde_json::to_value(PipelineConfig::default()).expect("defaults serialize");
    let mut value = defaults.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let given: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        check_keys(&given, &defaults, "")?;
        merge(&mut value, given);
    }
    for (k, v) in overrides {
        apply_override(&mut value, &defaults, k, v)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// Plain-text event log, one line per event.
pub struct Logger {
    lines: Vec<String>,
    quiet: bool,
}

impl Logger {
    pub fn new(quiet: bool) -> Self {
        Self {
            lines: Vec::new(),
            quiet,
        }
    }

    pub fn info(&mut self, line: impl Into<String>) {
        let line = line.into();
        if !self.quiet {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }

    fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pretty(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    Ok(CorpusManifest::read(path)?)
}

fn threads_from(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("NEOC_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("NEOC_THREADS must be a positive integer, got {v:?}")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    Ok(n)
}

/// Separates `--dotted.key=value` overrides from the flags clap handles.
fn split_args(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let own = ["config", "threads", "quiet", "help", "version"];
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        if i > 0 {
            if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
                if !own.contains(&k) {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

/// Runs the command line `args` (program name first) and returns the exit
/// code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let (clap_args, overrides) = split_args(args.into_iter().map(Into::into).collect());
    let parsed = match Args::try_parse_from(clap_args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_parsed(&parsed, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("neoc {}: {e}", parsed.subcommand.name());
            e.exit_code()
        }
    }
}

fn run_parsed(args: &Args, overrides: &[(String, String)]) -> Result<()> {
    let threads = threads_from(args.threads)?;
    let config = resolve_config(args.config.as_deref(), overrides)?;
    let name = args.subcommand.name();
    let out = config.output_dir.clone();
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Domain(format!("cannot create output dir {}: {e}", out.display())))?;
    write_text(&out.join("config.json"), &pretty(&config))?;

    let mut log = Logger::new(args.quiet);
    log.info(format!("{name}: threads={threads}"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Domain(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| dispatch(args.subcommand, &config, &mut log));

    let result = match &outcome {
        Ok(summary) => {
            log.info(format!("{name}: done"));
            json!({"subcommand": name, "status": "ok", "summary": summary})
        }
        Err(e) => {
            log.info(format!("{name}: error: {e}"));
            json!({"subcommand": name, "status": "error", "exit_code": e.exit_code(), "error": e.to_string()})
        }
    };
    write_text(&out.join(format!("{name}.result.json")), &pretty(&result))?;
    write_text(&out.join(format!("{name}.log")), &log.text())?;
    outcome.map(|_| ())
}

fn dispatch(sub: Subcommand, c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let f64_model = c.train.precision == Precision::F64;
    match sub {
        Subcommand::Ingest => ingest(c, log),
        Subcommand::Synth => synth(c, log),
        Subcommand::Curate => curate_cmd(c, log),
        Subcommand::Split => split_cmd(c, log),
        Subcommand::Pretrain if f64_model => pretrain::<f64>(c, log),
        Subcommand::Pretrain => pretrain::<f32>(c, log),
        Subcommand::Finetune if f64_model => finetune_cmd::<f64>(c, log),
        Subcommand::Finetune => finetune_cmd::<f32>(c, log),
        Subcommand::Eval if f64_model => eval_cmd::<f64>(c, log),
        Subcommand::Eval => eval_cmd::<f32>(c, log),
        Subcommand::Detect if f64_model => detect_cmd::<f64>(c, log),
        Subcommand::Detect => detect_cmd::<f32>(c, log),
        Subcommand::Gradcheck => gradcheck_cmd(c, log),
        Subcommand::Report => report_cmd(c, log),
    }
}

fn ingest(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    existing(&c.corpus_root, "corpus_root")?;
    let taxonomy = load_taxonomy_from_folders(&c.corpus_root)?;
    let manifest = manifest_from_taxonomy(&taxonomy);
    manifest.write(c.output_dir.join("manifest.jsonl"))?;
    write_text(&c.output_dir.join("taxonomy.json"), &taxonomy.to_json())?;
    log.info(format!(
        "ingest: {} images in {} classes, {} outside any class folder",
        manifest.len(),
        taxonomy.len(),
        taxonomy.unattached_images().len()
    ));
    Ok(json!({
        "samples": manifest.len(),
        "classes": taxonomy.len(),
        "unattached_images": taxonomy.unattached_images().len(),
        "outputs": ["manifest.jsonl", "taxonomy.json"],
    }))
}

fn synth(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let corpus = generate_synthetic_corpus(&c.synth.spec, c.synth.seed);
    corpus.write(&c.output_dir)?;
    let histogram = corpus.manifest.histogram();
    log.info(format!("synth: {} images, seed {}", corpus.manifest.len(), c.synth.seed));
    Ok(json!({
        "samples": corpus.manifest.len(),
        "histogram": histogram,
        "outputs": ["manifest.jsonl", "taxonomy.json"],
    }))
}

fn curate_cmd(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let manifest_path = c.manifest_path();
    existing(&manifest_path, "manifest")?;
    let manifest = read_manifest(&manifest_path)?;
    let source = DirSource::new(&c.corpus_root);
    let outcome = curate(&manifest, &c.curation, &source)?;

    let dest = c.output_dir.join("curated");
    let derived: MemorySource = outcome.derived_images.iter().cloned().collect();
    for s in &outcome.kept.samples {
        let target = dest.join(&s.path);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir)?;
        }
        match derived.load(&s.path) {
            Ok(img) => fs::write(&target, crate::corpus::encode_ppm(&img))?,
            Err(_) => {
                fs::copy(c.corpus_root.join(&s.path), &target)?;
            }
        }
    }
    outcome.kept.write(dest.join("manifest.jsonl"))?;
    let taxonomy = c.taxonomy.clone().unwrap_or_else(|| c.corpus_root.join("taxonomy.json"));
    if taxonomy.exists() {
        fs::copy(&taxonomy, dest.join("taxonomy.json"))?;
    }
    let exclusions: String = outcome
        .excluded
        .iter()
        .map(|e| serde_json::to_string(e).expect("exclusion serializes") + "\n")
        .collect();
    write_text(&c.output_dir.join("exclusions.jsonl"), &exclusions)?;

    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &outcome.excluded {
        *reasons.entry(e.reason.as_str()).or_default() += 1;
        log.info(format!("curate: excluded {} ({})", e.path, e.reason));
    }
    log.info(format!(
        "curate: kept {} samples, excluded {}",
        outcome.kept.len(),
        outcome.excluded.len()
    ));
    Ok(json!({
        "input_samples": manifest.len(),
        "kept": outcome.kept.len(),
        "excluded": outcome.excluded.len(),
        "excluded_by_reason": reasons,
        "outputs": ["curated/manifest.jsonl", "exclusions.jsonl"],
    }))
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub descriptor: SplitDescriptor,
    pub non_computable: Vec<ClassId>,
    pub train: usize,
    pub test: usize,
}

fn split_cmd(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let manifest_path = c.manifest_path();
    existing(&manifest_path, "manifest")?;
    let manifest = read_manifest(&manifest_path)?;
    let outcome = stratified_split(&manifest, &c.split)?;
    outcome.train.write(c.output_dir.join("train.jsonl"))?;
    outcome.test.write(c.output_dir.join("test.jsonl"))?;
    let exclusions: String = outcome
        .non_computable
        .iter()
        .map(|class| {
            log.info(format!("split: class {class} is non-computable"));
            json!({"class": class, "reason": "non_computable"}).to_string() + "\n"
        })
        .collect();
    write_text(&c.output_dir.join("exclusions.jsonl"), &exclusions)?;
    let info = SplitInfo {
        descriptor: outcome.descriptor,
        non_computable: outcome.non_computable.clone(),
        train: outcome.train.len(),
        test: outcome.test.len(),
    };
    write_text(&c.output_dir.join("split.json"), &pretty(&info))?;
    let mode = if c.split.group_by_artifact { "per-artifact" } else { "per-image" };
    log.info(format!(
        "split: {} train, {} test, mode {mode}, seed {}",
        info.train, info.test, c.split.seed
    ));
    Ok(json!({
        "train": info.train,
        "test": info.test,
        "non_computable": info.non_computable,
        "descriptor": info.descriptor,
        "outputs": ["train.jsonl", "test.jsonl", "exclusions.jsonl", "split.json"],
    }))
}

fn load_sets(
    c: &PipelineConfig,
    classes: &[ClassId],
    size: (usize, usize),
) -> Result<(Dataset, Option<Dataset>)> {
    let source = DirSource::new(&c.corpus_root);
    let train_path = required(&c.train_manifest, "train_manifest")?;
    let train = Dataset::load(&read_manifest(train_path)?, &source, classes, size)?;
    let test = match &c.test_manifest {
        Some(p) => {
            existing(p, "test_manifest")?;
            Some(Dataset::load(&read_manifest(p)?, &source, classes, size)?)
        }
        None => None,
    };
    Ok((train, test))
}

fn finish_training<T: Real>(
    c: &PipelineConfig,
    log: &mut Logger,
    model: &Model<T>,
    history: &crate::trainer::TrainHistory,
) -> Result<Value> {
    for r in &history.records {
        let test = r.test_mean_class_acc.map(|v| format!(" test_mean_class_acc={v:.4}")).unwrap_or_default();
        log.info(format!(
            "epoch {}: lr={:.6} train_loss={:.6} train_acc={:.4}{test}",
            r.epoch, r.lr, r.train_loss, r.train_acc
        ));
    }
    let ckpt = c.output_dir.join("model.ckpt");
    save_checkpoint(model, &ckpt)?;
    write_text(&c.output_dir.join("history.csv"), &history.to_csv())?;
    let digest = checkpoint_digest(&fs::read(&ckpt)?);
    log.info(format!("checkpoint sha256 {digest}"));
    Ok(json!({
        "classes": model.class_names,
        "epochs_run": history.records.len(),
        "final": history.final_record(),
        "checkpoint_sha256": digest,
        "lineage": model.lineage,
        "outputs": ["model.ckpt", "history.csv"],
    }))
}

fn pretrain<T: Real>(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let train_path = required(&c.train_manifest, "train_manifest")?;
    let classes = read_manifest(train_path)?.classes();
    let (_, h, w) = c.arch.input_size;
    let (train, test) = load_sets(c, &classes, (w, h))?;
    log.info(format!(
        "pretrain: {} train images, {} classes, {} epochs",
        train.len(),
        classes.len(),
        c.train.epochs
    ));
    let (model, history) = train_from_scratch::<T>(c.arch.clone(), &train, &c.train, test.as_ref())?;
    finish_training(c, log, &model, &history)
}

fn finetune_cmd<T: Real>(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    let bytes = fs::read(ckpt)?;
    let pretrained = Model::<T>::from_checkpoint_bytes(&bytes)?;
    let train_path = required(&c.train_manifest, "train_manifest")?;
    let classes = read_manifest(train_path)?.classes();
    let (_, h, w) = pretrained.arch().input_size;
    let (train, test) = load_sets(c, &classes, (w, h))?;
    log.info(format!(
        "finetune: from {} onto {} classes, {} train images",
        ckpt.display(),
        classes.len(),
        train.len()
    ));
    let (model, history) = finetune(&pretrained, checkpoint_digest(&bytes), &train, &c.train, test.as_ref())?;
    finish_training(c, log, &model, &history)
}

fn eval_cmd<T: Real>(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    let model = crate::model::load_checkpoint::<T>(ckpt)?;
    let test_path = required(&c.test_manifest, "test_manifest")?;
    let manifest = read_manifest(test_path)?;
    let (non_computable, split) = match &c.split_info {
        Some(p) => {
            existing(p, "split_info")?;
            let info: SplitInfo = serde_json::from_str(&fs::read_to_string(p)?)?;
            (info.non_computable, Some(info.descriptor))
        }
        None => (Vec::new(), None),
    };
    let taxonomy = match (&c.taxonomy, c.eval.rollup_depth) {
        (Some(p), _) => {
            existing(p, "taxonomy")?;
            Some(Taxonomy::from_json(&fs::read_to_string(p)?)?)
        }
        (None, Some(_)) => {
            return Err(CliError::Usage("eval.rollup_depth needs the `taxonomy` key".into()));
        }
        (None, None) => None,
    };
    let rollup = match (&taxonomy, c.eval.rollup_depth) {
        (Some(t), Some(d)) => Some((t, d)),
        _ => None,
    };
    let source = DirSource::new(&c.corpus_root);
    let (report, predictions) = evaluate(&model, &manifest, &source, &non_computable, split, rollup)?;
    write_text(&c.output_dir.join("metrics.json"), &report.to_json())?;
    write_text(&c.output_dir.join("metrics.txt"), &report.render_table())?;
    write_text(&c.output_dir.join("predictions.jsonl"), &predictions_to_jsonl(&predictions))?;
    for e in &report.leaf.excluded_classes {
        log.info(format!("eval: class {} excluded from means ({})", e.class, e.reason));
    }
    log.info(format!(
        "eval: mean_class_accuracy={:.4} macro_f1={:.4} overall_accuracy={:.4}",
        report.leaf.mean_class_accuracy, report.leaf.macro_f1, report.leaf.overall_accuracy
    ));
    Ok(json!({
        "samples": report.leaf.samples,
        "mean_class_accuracy": report.leaf.mean_class_accuracy,
        "macro_f1": report.leaf.macro_f1,
        "weighted_f1": report.leaf.weighted_f1,
        "overall_accuracy": report.leaf.overall_accuracy,
        "excluded_classes": report.leaf.excluded_classes,
        "rollup_mean_class_accuracy": report.rollup.as_ref().map(|r| r.metrics.mean_class_accuracy),
        "outputs": ["metrics.json", "metrics.txt", "predictions.jsonl"],
    }))
}

fn detect_cmd<T: Real>(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    use rayon::prelude::*;
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    let model = crate::model::load_checkpoint::<T>(ckpt)?;
    let manifest_path = c.manifest_path();
    existing(&manifest_path, "manifest")?;
    let manifest = read_manifest(&manifest_path)?;
    let source = DirSource::new(&c.corpus_root);
    let per_image = manifest
        .samples
        .par_iter()
        .map(|s| {
            let image = source.load(&s.path)?;
            let dets = detect_objects(&model, &image, &c.detect.params)?;
            Ok((ImageRegions::from_detections(&s.path, &dets), dets))
        })
        .collect::<Result<Vec<_>>>()?;
    let lines: Vec<ImageRegions> = per_image.iter().map(|(l, _)| l.clone()).collect();
    write_text(&c.output_dir.join("detections.jsonl"), &regions_to_jsonl(&lines))?;
    let kept: usize = lines.iter().map(|l| l.regions.len()).sum();
    log.info(format!("detect: {} images, {kept} detections after suppression", lines.len()));

    let annotations = annotations_from_manifest(&manifest);
    let mut summary = json!({"images": lines.len(), "detections": kept, "outputs": ["detections.jsonl"]});
    if !annotations.is_empty() {
        let mut dets = Vec::new();
        let mut truths = Vec::new();
        for (s, (_, d)) in manifest.samples.iter().zip(&per_image) {
            if !s.boxes.is_empty() {
                dets.push(d.clone());
                truths.push(s.boxes.iter().map(|b| (b.rect(), b.class.clone())).collect());
            }
        }
        let report = evaluate_detections(&dets, &truths, c.detect.match_iou)?;
        write_text(&c.output_dir.join("detection_metrics.json"), &pretty(&report))?;
        log.info(format!(
            "detect: recall={:.4} precision={:.4} at iou {}",
            report.recall, report.precision, c.detect.match_iou
        ));
        summary["recall"] = json!(report.recall);
        summary["precision"] = json!(report.precision);
        summary["outputs"] = json!(["detections.jsonl", "detection_metrics.json"]);
    }
    Ok(summary)
}

fn gradcheck_cmd(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let results: Vec<_> = if c.gradcheck.eps == DEFAULT_EPS {
        run_suite(0..c.gradcheck.seeds)
    } else {
        use crate::tensor::gradcheck::{check_target, Target};
        let mut v = Vec::new();
        for precision in [Precision::F64, Precision::F32] {
            for target in Target::ALL {
                for seed in 0..c.gradcheck.seeds {
                    v.push(check_target(target, seed, precision, c.gradcheck.eps));
                }
            }
        }
        v
    };
    write_text(&c.output_dir.join("gradcheck.json"), &pretty(&results))?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for r in &results {
        let key = format!("{:?}/{}", r.precision, serde_json::to_value(r.target)?.as_str().unwrap_or(""));
        let e = worst.entry(key.to_lowercase()).or_insert(0.0);
        *e = e.max(r.max_rel_error);
    }
    for (k, v) in &worst {
        log.info(format!("gradcheck: {k} max relative error {v:.3e}"));
    }
    for r in &failed {
        log.info(format!(
            "gradcheck: FAILED {:?} seed {} {:?}: {:.3e} >= {:.0e}",
            r.target, r.seed, r.precision, r.max_rel_error, r.tolerance
        ));
    }
    if !failed.is_empty() {
        return Err(CliError::Domain(format!(
            "{} of {} gradient checks exceeded tolerance",
            failed.len(),
            results.len()
        )));
    }
    Ok(json!({"checks": results.len(), "failed": 0, "worst": worst, "outputs": ["gradcheck.json"]}))
}

fn report_cmd(c: &PipelineConfig, log: &mut Logger) -> Result<Value> {
    let path = c.metrics.clone().unwrap_or_else(|| c.output_dir.join("metrics.json"));
    existing(&path, "metrics")?;
    let report = MetricsReport::from_json(&fs::read_to_string(&path)?)?;
    let table = report.render_table();
    write_text(&c.output_dir.join("report.txt"), &table)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(table.as_bytes())?;
    log.info(format!(
        "report: {} classes, {} excluded",
        report.leaf.per_class.len(),
        report.leaf.excluded_classes.len()
    ));
    Ok(json!({
        "excluded_classes": report.leaf.excluded_classes,
        "mean_class_accuracy": report.leaf.mean_class_accuracy,
        "macro_f1": report.leaf.macro_f1,
        "outputs": ["report.txt"],
    }))
}
