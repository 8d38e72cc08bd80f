//! Command-line front end. Every command resolves its configuration
//! (built-in defaults < `--config` file < flags), writes a run manifest,
//! then does its work. `rerun` replays a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::config::{ConfigError, KeyValues};
use crate::data::{
    self, build_triplets, generate_synthetic, generate_synthetic_corpus, normalize_records, parse_dataset, parse_fasta,
    parse_manifest, write_dataset, DataError, Dataset, DatasetSplit, ExpressionTable, NormalizationStats, Partition,
    SyntheticConfig, TargetScale, TranscriptRecord, TripletSources,
};
use crate::modality::Modality;
use crate::model::{load_checkpoint, save_checkpoint, IsoFormerModel, ModelError};
use crate::tokenization::chunk_spans;
use crate::training::{
    self, evaluate, history_csv, parse_conditions, prepare_samples, run_ablation, run_experiment, summarize, summary_tsv,
    tokenize_record, RunConfig, TrainError, METRICS_HEADER,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.isof";
pub const RUN_CONFIG_FILE: &str = "run.conf";
pub const STATS_FILE: &str = "stats.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    NonFinite(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Io { .. } => EXIT_IO,
            Self::NonFinite(_) => EXIT_NON_FINITE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => Self::Io {
                path: PathBuf::from(path),
                source,
            },
            DataError::InvalidConfig(m) => Self::Usage(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => Self::Io { path: path.into(), source },
            ModelError::Config(c) => Self::Config(c),
            ModelError::InvalidConfig(_) | ModelError::NoModalityPresent | ModelError::Aggregation(_) => {
                Self::Usage(e.to_string())
            }
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Self::NonFinite(e.to_string()),
            TrainError::InvalidConfig(m) => Self::Usage(m),
            TrainError::Config(c) => Self::Config(c),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidThreshold(_) => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "isoformer", version, about = "Multi-modal transcript isoform expression prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Join expression, genome, transcript and protein files into a dataset.
    BuildDataset(BuildDatasetArgs),
    /// Write a planted-signal synthetic dataset and its ground truth.
    GenSynthetic(GenSyntheticArgs),
    /// Split, normalize, train and evaluate one model.
    Train(TrainArgs),
    /// Score a trained run on one partition of a dataset.
    Evaluate(EvaluateArgs),
    /// Train every condition under every seed and summarize.
    Ablate(AblateArgs),
    /// Compare region attention ratios of two checkpoints.
    AnalyzeAttention(AnalyzeArgs),
    /// Replay the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. `--help` lists the keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    /// Expression TSV: transcript_id then one TPM column per tissue.
    #[arg(long)]
    pub expression: PathBuf,
    #[arg(long)]
    pub genome_fasta: PathBuf,
    #[arg(long)]
    pub rna_fasta: PathBuf,
    #[arg(long)]
    pub protein_fasta: PathBuf,
    /// Transcript manifest TSV (transcript, gene, protein, chromosome, tss, strand).
    #[arg(long)]
    pub manifest: PathBuf,
    /// DNA window length centred on the TSS; must be even.
    #[arg(long)]
    pub window: usize,
    /// Output dataset; sidecars get `.stats.tsv`, `.skipped.tsv` and `.manifest.txt` suffixes.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub genes: Option<usize>,
    #[arg(long)]
    pub isoforms: Option<usize>,
    #[arg(long)]
    pub tissues: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset; the ground truth goes to `<out>.truth.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write this many fresh genes sharing the motifs, for encoder warm-up.
    #[arg(long, requires = "corpus_out")]
    pub corpus_genes: Option<usize>,
    #[arg(long)]
    pub corpus_out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset with raw TPM targets.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Modality pathways, e.g. `rna` or `dna+rna+protein`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Encoders to warm up before training (`none`, `rna+protein`, ...).
    #[arg(long)]
    pub warmup: Option<String>,
    /// Dataset whose sequences feed the warm-up instead of the train split.
    #[arg(long)]
    pub warmup_dataset: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Dataset with raw TPM targets.
    #[arg(long)]
    pub dataset: PathBuf,
    /// train, validation, test or all.
    #[arg(long, default_value = "test")]
    pub partition: String,
    /// Metrics TSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `table2`, `table5`, or `;`-separated `modalities[@warmup]` items.
    #[arg(long, default_value = "table2")]
    pub conditions: String,
    /// Number of seeds; runs use seeds 0..N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub warmup_dataset: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Model whose ratios form the numerator of Δρ (e.g. multi-modal).
    #[arg(long)]
    pub checkpoint_a: PathBuf,
    /// Reference model (e.g. RNA only).
    #[arg(long)]
    pub checkpoint_b: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Region table TSV: transcript_id, region_name, start, end on the RNA sequence.
    #[arg(long)]
    pub regions: PathBuf,
    /// Restrict to the test partition of this split file.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the layer-by-head Δρ matrix here.
    #[arg(long)]
    pub matrix_out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Where a resolved configuration value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Derived,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::File => "file",
            Self::Flag => "flag",
            Self::Derived => "derived",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub values: KeyValues,
    pub sources: BTreeMap<String, Source>,
}

impl Resolved {
    /// Sets a value the command computed from its inputs, unless the user set it.
    pub fn derive(&mut self, key: &str, value: impl fmt::Display) {
        if self.sources.get(key).is_none_or(|s| *s == Source::Default) {
            self.values.set(key, value);
            self.sources.insert(key.to_string(), Source::Derived);
        }
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.sources.get(key).copied()
    }
}

/// Keys a manifest carries besides configuration; ignored when a manifest
/// is read back as a config file.
const MANIFEST_PREFIXES: [&str; 2] = ["run.", "input."];

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Layers defaults, then the config file, then `--set` pairs and dedicated
/// flags. Keys unknown to `defaults` are rejected.
pub fn resolve(defaults: &KeyValues, args: &ConfigArgs, flags: &[(&str, String)]) -> Result<Resolved, CliError> {
    let mut values = defaults.clone();
    let mut sources: BTreeMap<String, Source> = defaults.keys().map(|k| (k.to_string(), Source::Default)).collect();
    let mut apply = |key: &str, value: &str, source: Source| -> Result<(), CliError> {
        if !defaults.contains(key) {
            return Err(ConfigError::UnknownKey(key.to_string()).into());
        }
        values.set(key, value);
        sources.insert(key.to_string(), source);
        Ok(())
    };
    if let Some(path) = &args.config {
        let file = KeyValues::parse(&read_text(path)?)?;
        for (k, v) in file.iter() {
            if MANIFEST_PREFIXES.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            apply(k, v, Source::File)?;
        }
    }
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        apply(k.trim(), v.trim(), Source::Flag)?;
    }
    for (k, v) in flags {
        apply(k, v, Source::Flag)?;
    }
    Ok(Resolved { values, sources })
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance record written before a command does any work.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub config: Option<Resolved>,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed: None,
            inputs: Vec::new(),
            config: None,
            started_unix,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let hash = sha256_file(path)?;
        self.inputs.push((name.to_string(), path.to_path_buf(), hash));
        Ok(())
    }

    /// Hash over every input hash, in input order.
    pub fn inputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, hash) in &self.inputs {
            h.update(name.as_bytes());
            h.update(b"\0");
            h.update(hash.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# isoformer run manifest\n# started_unix: {}\n", self.started_unix);
        if let Some(cfg) = &self.config {
            for (k, s) in &cfg.sources {
                out.push_str(&format!("# source {k}: {s}\n"));
            }
        }
        let mut kv = KeyValues::new();
        kv.set("run.command", &self.command);
        for (i, a) in self.args.iter().enumerate() {
            kv.set(&format!("run.arg.{i:03}"), a);
        }
        if let Some(seed) = self.seed {
            kv.set("run.seed", seed);
        }
        kv.set("run.inputs_sha256", self.inputs_digest());
        for (name, path, hash) in &self.inputs {
            kv.set(&format!("input.{name}.path"), path.display());
            kv.set(&format!("input.{name}.sha256"), hash);
        }
        if let Some(cfg) = &self.config {
            kv.merge(&cfg.values);
        }
        out.push_str(&kv.to_text());
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_text(path, &self.to_text())
    }
}

/// Arguments recorded by `RunManifest::to_text`, in order.
pub fn manifest_args(text: &str) -> Result<Vec<String>, CliError> {
    let kv = KeyValues::parse(text)?;
    let mut args: Vec<(&str, &str)> = kv.iter().filter(|(k, _)| k.starts_with("run.arg.")).collect();
    args.sort();
    if args.is_empty() {
        return Err(CliError::Data("manifest records no command".into()));
    }
    Ok(args.into_iter().map(|(_, v)| v.to_string()).collect())
}

fn key_help(defaults: &KeyValues) -> String {
    let mut out = String::from("Configuration keys (default values):\n");
    for (k, v) in defaults.iter() {
        out.push_str(&format!("  {k}={v}\n"));
    }
    out
}

/// The clap command with each subcommand's configuration keys appended to its help.
pub fn command() -> clap::Command {
    let run_keys = key_help(&run_defaults());
    Cli::command()
        .mut_subcommand("train", |c| c.after_help(run_keys.clone()))
        .mut_subcommand("ablate", |c| c.after_help(run_keys.clone()))
        .mut_subcommand("gen-synthetic", |c| c.after_help(key_help(&SyntheticConfig::default().to_key_values())))
        .mut_subcommand("analyze-attention", |c| c.after_help(key_help(&analysis_defaults())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(parse_dataset(&read_text(path)?, &path.display().to_string())?)
}

fn raw_dataset(path: &Path) -> Result<Dataset, CliError> {
    let ds = load_dataset(path)?;
    if ds.records.is_empty() {
        return Err(CliError::Data(format!("{}: dataset is empty", path.display())));
    }
    if let Some(r) = ds.records.iter().find(|r| r.scale != TargetScale::RawTpm) {
        return Err(CliError::Data(format!("{}: expected raw TPM targets ({})", path.display(), r.transcript_id)));
    }
    Ok(ds)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_build_dataset(a: &BuildDatasetArgs, argv: &[String]) -> Result<i32, CliError> {
    let mut manifest = RunManifest::new("build-dataset", argv);
    for (name, p) in [
        ("expression", &a.expression),
        ("genome_fasta", &a.genome_fasta),
        ("rna_fasta", &a.rna_fasta),
        ("protein_fasta", &a.protein_fasta),
        ("manifest", &a.manifest),
    ] {
        manifest.input(name, p)?;
    }
    manifest.write(&sidecar(&a.out, ".manifest.txt"))?;
    let name = |p: &Path| p.display().to_string();
    let expression = ExpressionTable::parse(&read_text(&a.expression)?, &name(&a.expression))?;
    let genome = parse_fasta(&read_text(&a.genome_fasta)?, &name(&a.genome_fasta))?;
    let rna = parse_fasta(&read_text(&a.rna_fasta)?, &name(&a.rna_fasta))?;
    let protein = parse_fasta(&read_text(&a.protein_fasta)?, &name(&a.protein_fasta))?;
    let rows = parse_manifest(&read_text(&a.manifest)?, &name(&a.manifest))?;
    let src = TripletSources {
        expression: &expression,
        genome: &genome,
        rna: &rna,
        protein: &protein,
        manifest: &rows,
    };
    let (records, report) = build_triplets(&src, a.window)?;
    write_text(&a.out, &write_dataset(&records, &expression.tissues))?;
    write_text(&sidecar(&a.out, ".skipped.tsv"), &report.to_text())?;
    if !records.is_empty() {
        let targets: Vec<Vec<f64>> = records.iter().map(|r| r.targets.clone()).collect();
        let (_, stats) = data::normalize_targets(&targets, &expression.tissues, None)?;
        write_text(&sidecar(&a.out, ".stats.tsv"), &stats.to_text())?;
    }
    eprintln!("{} records written, {} skipped", records.len(), report.len());
    Ok(0)
}

fn cmd_gen_synthetic(a: &GenSyntheticArgs, argv: &[String]) -> Result<i32, CliError> {
    let defaults = SyntheticConfig::default().to_key_values();
    let mut flags = Vec::new();
    if let Some(v) = a.genes {
        flags.push(("synthetic.genes", v.to_string()));
    }
    if let Some(v) = a.isoforms {
        flags.push(("synthetic.isoforms_per_gene", v.to_string()));
    }
    if let Some(v) = a.tissues {
        flags.push(("synthetic.num_tissues", v.to_string()));
    }
    if let Some(v) = a.noise {
        flags.push(("synthetic.noise", v.to_string()));
    }
    let resolved = resolve(&defaults, &a.config, &flags)?;
    let config = SyntheticConfig::from_key_values(&resolved.values)?;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut manifest = RunManifest::new("gen-synthetic", argv);
    manifest.seed = Some(a.seed);
    if let Some(p) = &a.config.config {
        manifest.input("config", p)?;
    }
    manifest.config = Some(resolved);
    manifest.write(&sidecar(&a.out, ".manifest.txt"))?;
    let (records, truth) = generate_synthetic(&config, a.seed)?;
    let tissues = data::default_tissue_names(config.num_tissues);
    write_text(&a.out, &write_dataset(&records, &tissues))?;
    write_text(&sidecar(&a.out, ".truth.txt"), &truth.to_text())?;
    if let (Some(n), Some(path)) = (a.corpus_genes, &a.corpus_out) {
        let corpus = generate_synthetic_corpus(&config, a.seed, n)?;
        write_text(path, &write_dataset(&corpus, &tissues))?;
    }
    eprintln!("{} records written", records.len());
    Ok(0)
}

fn run_defaults() -> KeyValues {
    RunConfig::default().to_key_values()
}

/// Resolves a run configuration and fills in what the dataset determines:
/// the tissue count and MASK tokens for warmed encoders.
fn resolve_run(args: &ConfigArgs, flags: &[(&str, String)], tissues: usize) -> Result<(Resolved, RunConfig), CliError> {
    let mut resolved = resolve(&run_defaults(), args, flags)?;
    resolved.derive("model.num_tissues", tissues);
    let warm_text = resolved.values.get("warmup.modalities").unwrap_or("none").to_string();
    let warm = training::parse_optional_set(&warm_text).map_err(|reason| ConfigError::InvalidValue {
        key: "warmup.modalities".into(),
        value: warm_text.clone(),
        reason,
    })?;
    for m in warm.iter() {
        resolved.derive(&format!("tokenizer.{m}.mask_token"), true);
    }
    let run = RunConfig::from_key_values(&resolved.values)?;
    run.model.validate()?;
    run.train.validate()?;
    run.warmup.validate()?;
    if run.model.num_tissues != tissues {
        return Err(CliError::Data(format!(
            "model.num_tissues is {} but the dataset has {tissues} tissues",
            run.model.num_tissues
        )));
    }
    Ok((resolved, run))
}

fn warmup_corpus(path: Option<&PathBuf>, manifest: &mut RunManifest) -> Result<Option<Vec<TranscriptRecord>>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            manifest.input("warmup_dataset", p)?;
            Ok(Some(load_dataset(p)?.records))
        }
    }
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<i32, CliError> {
    let ds = raw_dataset(&a.dataset)?;
    let mut flags = Vec::new();
    if let Some(v) = &a.modalities {
        flags.push(("model.modalities", v.clone()));
    }
    if let Some(v) = &a.strategy {
        flags.push(("aggregation.strategy", v.clone()));
    }
    if let Some(v) = a.seed {
        flags.push(("training.seed", v.to_string()));
    }
    if let Some(v) = a.epochs {
        flags.push(("training.max_epochs", v.to_string()));
    }
    if let Some(v) = a.learning_rate {
        flags.push(("training.learning_rate", v.to_string()));
    }
    if let Some(v) = &a.warmup {
        flags.push(("warmup.modalities", v.clone()));
    }
    let (resolved, run) = resolve_run(&a.config, &flags, ds.tissues.len())?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new("train", argv);
    manifest.seed = Some(run.train.seed);
    manifest.input("dataset", &a.dataset)?;
    if let Some(p) = &a.config.config {
        manifest.input("config", p)?;
    }
    let corpus = warmup_corpus(a.warmup_dataset.as_ref(), &mut manifest)?;
    manifest.config = Some(resolved);
    manifest.write(&a.out_dir.join(MANIFEST_FILE))?;
    let out = run_experiment(&ds.records, &ds.tissues, &run, corpus.as_deref())?;
    save_checkpoint(&out.model, &a.out_dir.join(CHECKPOINT_FILE))?;
    write_text(&a.out_dir.join(RUN_CONFIG_FILE), &run.to_key_values().to_text())?;
    write_text(&a.out_dir.join(STATS_FILE), &out.stats.to_text())?;
    write_text(&a.out_dir.join(SPLIT_FILE), &out.split.to_text())?;
    write_text(&a.out_dir.join(HISTORY_FILE), &history_csv(&out.history))?;
    let label = run.model.modalities.to_string();
    let metrics = format!("{METRICS_HEADER}{}", out.test_report.tsv_rows(&label, run.train.seed));
    write_text(&a.out_dir.join(METRICS_FILE), &metrics)?;
    for (m, losses) in out.warmup_losses.iter() {
        let text: String = std::iter::once("step,loss\n".to_string())
            .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
            .collect();
        write_text(&a.out_dir.join(format!("warmup_{m}.csv")), &text)?;
    }
    eprintln!(
        "best epoch {} of {}; test mean R2 {:.4}, mean Spearman {:.4}",
        out.best_epoch,
        out.history.len(),
        out.test_report.mean_r2,
        out.test_report.mean_spearman
    );
    Ok(0)
}

fn parse_partition(s: &str) -> Result<Option<Partition>, CliError> {
    match s {
        "train" => Ok(Some(Partition::Train)),
        "validation" | "val" => Ok(Some(Partition::Validation)),
        "test" => Ok(Some(Partition::Test)),
        "all" => Ok(None),
        other => Err(CliError::Usage(format!("unknown partition '{other}'"))),
    }
}

fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<i32, CliError> {
    let partition = parse_partition(&a.partition)?;
    let mut manifest = RunManifest::new("evaluate", argv);
    manifest.input("dataset", &a.dataset)?;
    let ckpt = a.run_dir.join(CHECKPOINT_FILE);
    manifest.input("checkpoint", &ckpt)?;
    let run_conf = KeyValues::parse(&read_text(&a.run_dir.join(RUN_CONFIG_FILE))?)?;
    let seed: u64 = run_conf.require("training.seed")?;
    manifest.seed = Some(seed);
    if let Some(out) = &a.out {
        manifest.write(&sidecar(out, ".manifest.txt"))?;
    }
    let model: IsoFormerModel<f32> = load_checkpoint(&ckpt)?;
    let stats_path = a.run_dir.join(STATS_FILE);
    let stats = NormalizationStats::parse(&read_text(&stats_path)?, &stats_path.display().to_string())?;
    let ds = raw_dataset(&a.dataset)?;
    let mut records = ds.records;
    if let Some(p) = partition {
        let split_path = a.run_dir.join(SPLIT_FILE);
        let split = DatasetSplit::parse(&read_text(&split_path)?, &split_path.display().to_string())?;
        let part = split.partition_of();
        records.retain(|r| part.get(r.transcript_id.as_str()) == Some(&p));
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("no records in partition '{}'", a.partition)));
    }
    normalize_records(&mut records, &stats.tissues, Some(&stats))?;
    let samples = prepare_samples(&records, &model.config)?;
    let report = evaluate(&model, &samples, &stats.tissues)?;
    let text = format!("{METRICS_HEADER}{}", report.tsv_rows(&model.config.modalities.to_string(), seed));
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    eprintln!("{} records; mean R2 {:.4}, mean Spearman {:.4}", samples.len(), report.mean_r2, report.mean_spearman);
    Ok(0)
}

fn cmd_ablate(a: &AblateArgs, argv: &[String]) -> Result<i32, CliError> {
    let conditions = parse_conditions(&a.conditions).map_err(CliError::Usage)?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let ds = raw_dataset(&a.dataset)?;
    let (resolved, base) = resolve_run(&a.config, &[], ds.tissues.len())?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new("ablate", argv);
    manifest.input("dataset", &a.dataset)?;
    if let Some(p) = &a.config.config {
        manifest.input("config", p)?;
    }
    let corpus = warmup_corpus(a.warmup_dataset.as_ref(), &mut manifest)?;
    manifest.config = Some(resolved);
    manifest.write(&a.out_dir.join(MANIFEST_FILE))?;
    let mut metrics = String::from(METRICS_HEADER);
    let mut histories = String::from("condition,seed,epoch,train_loss,val_loss\n");
    let runs = run_ablation(&ds.records, &ds.tissues, &base, &conditions, &seeds, corpus.as_deref(), |r| {
        eprintln!("{} seed {}: mean R2 {:.4}", r.condition, r.seed, r.report.mean_r2);
    })?;
    for r in &runs {
        metrics.push_str(&r.report.tsv_rows(&r.condition.name, r.seed));
        for h in &r.history {
            histories.push_str(&format!("{},{},{},{},{}\n", r.condition.name, r.seed, h.epoch, h.train_loss, h.val_loss));
        }
    }
    let summary = summary_tsv(&summarize(&runs));
    write_text(&a.out_dir.join(METRICS_FILE), &metrics)?;
    write_text(&a.out_dir.join(HISTORY_FILE), &histories)?;
    write_text(&a.out_dir.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(0)
}

fn analysis_defaults() -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("analysis.mu", analysis::DEFAULT_MU);
    kv.set("analysis.region", "CDS");
    kv
}

fn rna_attention(
    model: &IsoFormerModel<f32>,
    records: &[&TranscriptRecord],
    label: &str,
) -> Result<Vec<crate::encoder::AttentionRecord>, CliError> {
    let m = Modality::Rna;
    if !model.config.modalities.contains(m) {
        return Err(CliError::Data(format!("checkpoint {label} has no RNA pathway")));
    }
    let vocab = model.config.vocabulary(m)?;
    let encoder = model.encoders.get(m).expect("enabled modality has an encoder");
    records
        .iter()
        .map(|r| {
            let tokens = tokenize_record(r, m, &vocab, model.config.modality(m).max_tokens)
                .map_err(TrainError::from)?
                .expect("RNA is always present");
            let (_, att, _) = encoder.forward(&tokens, true, None).map_err(TrainError::from)?;
            Ok(att.expect("attention was requested"))
        })
        .collect()
}

fn cmd_analyze_attention(a: &AnalyzeArgs, argv: &[String]) -> Result<i32, CliError> {
    let mut flags = Vec::new();
    if let Some(mu) = a.mu {
        flags.push(("analysis.mu", mu.to_string()));
    }
    if let Some(r) = &a.region {
        flags.push(("analysis.region", r.clone()));
    }
    let resolved = resolve(&analysis_defaults(), &a.config, &flags)?;
    let mu: f64 = resolved.values.require("analysis.mu")?;
    let region: String = resolved.values.require("analysis.region")?;
    let mut manifest = RunManifest::new("analyze-attention", argv);
    for (name, p) in [
        ("checkpoint_a", &a.checkpoint_a),
        ("checkpoint_b", &a.checkpoint_b),
        ("dataset", &a.dataset),
        ("regions", &a.regions),
    ] {
        manifest.input(name, p)?;
    }
    if let Some(p) = &a.split {
        manifest.input("split", p)?;
    }
    manifest.config = Some(resolved);
    manifest.write(&sidecar(&a.out, ".manifest.txt"))?;
    let model_a: IsoFormerModel<f32> = load_checkpoint(&a.checkpoint_a)?;
    let model_b: IsoFormerModel<f32> = load_checkpoint(&a.checkpoint_b)?;
    let ds = load_dataset(&a.dataset)?;
    let intervals = analysis::parse_region_table(&read_text(&a.regions)?)?;
    let mut records: Vec<&TranscriptRecord> = ds.records.iter().collect();
    if let Some(p) = &a.split {
        let split = DatasetSplit::parse(&read_text(p)?, &p.display().to_string())?;
        let part = split.partition_of();
        records.retain(|r| part.get(r.transcript_id.as_str()) == Some(&Partition::Test));
    }
    let annotated: std::collections::HashSet<&str> = intervals.iter().map(|r| r.transcript_id.as_str()).collect();
    records.retain(|r| annotated.contains(r.transcript_id.as_str()));
    if records.is_empty() {
        return Err(CliError::Data("no annotated transcripts to analyze".into()));
    }
    let masks_for = |model: &IsoFormerModel<f32>| -> Result<Vec<Vec<bool>>, CliError> {
        let rna = model.config.modality(Modality::Rna);
        records
            .iter()
            .map(|r| {
                let len = r.rna_seq.len();
                let mut regions = analysis::annotate_regions(&r.transcript_id, len, rna.k, &intervals)?;
                let tokens = chunk_spans(len, rna.k).len().min(rna.max_tokens);
                let mut mask = regions.remove(&region).unwrap_or_else(|| vec![false; tokens]);
                mask.truncate(tokens);
                Ok(mask)
            })
            .collect()
    };
    let rho_a = analysis::attention_ratio(&rna_attention(&model_a, &records, "a")?, &masks_for(&model_a)?, mu)?;
    let rho_b = analysis::attention_ratio(&rna_attention(&model_b, &records, "b")?, &masks_for(&model_b)?, mu)?;
    let cells = analysis::compare(&rho_a, &rho_b)?;
    write_text(&a.out, &analysis::delta_tsv(&cells))?;
    if let Some(p) = &a.matrix_out {
        write_text(p, &analysis::delta_matrix_text(&cells))?;
    }
    eprintln!(
        "{} transcripts; {} of {} layer/head cells significant",
        records.len(),
        cells.iter().filter(|c| c.selected).count(),
        cells.len()
    );
    Ok(0)
}

fn cmd_rerun(a: &RerunArgs) -> Result<i32, CliError> {
    let args = manifest_args(&read_text(&a.manifest)?)?;
    if args.first().map(String::as_str) == Some("rerun") {
        return Err(CliError::Usage("a rerun manifest cannot be replayed".into()));
    }
    let cli = Cli::try_parse_from(std::iter::once("isoformer".to_string()).chain(args.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(&cli, &args)
}

/// Runs a parsed command; `argv` excludes the program name and is recorded
/// in the manifest.
pub fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32, CliError> {
    match &cli.command {
        Command::BuildDataset(a) => cmd_build_dataset(a, argv),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Ablate(a) => cmd_ablate(a, argv),
        Command::AnalyzeAttention(a) => cmd_analyze_attention(a, argv),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match command().try_get_matches_from(&args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, &args[1.min(args.len())..]) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
