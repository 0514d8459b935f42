//! The `unilabel` command line.
//!
//! Exit codes: 0 on success, 1 on data errors (missing or malformed inputs),
//! 2 on usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;
use walkdir::WalkDir;

use crate::catalog::{
    class_histogram, manifest_from_tsv, manifest_to_tsv, record_histograms, rejected_to_tsv,
    scan_dataset, validate_pairs, ClassHistogram, HistogramReport, Manifest, PairingRule, Record,
    Split,
};
use crate::error::Error;
use crate::metrics::{per_domain_report, ConfusionMatrix, DomainTally, ExclusivityTally};
use crate::raster::{encode_universal, read_universal, DecodeOptions, Narrowing, UniversalLoader};
use crate::splitter::{propose_split, split_divergence, SplitItem, SplitSidecar, DEFAULT_FRACTION};
use crate::taxonomy::{
    label_space_expansion, merge_label_spaces, parse_directives, parse_taxonomy, ClassMap,
    DatasetTaxonomy, Strictness, UniversalLabelSpace,
};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const DEFAULT_SWEEPS: u32 = 10;
pub const DEFAULT_IGNORE_SENTINEL: u16 = u16::MAX;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "unilabel", version, about = "Merge segmentation label-spaces, remap annotations, split and evaluate")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON pipeline config; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Taxonomy files, comma separated, in label-space order.
    #[arg(long, global = true, value_delimiter = ',')]
    taxonomies: Vec<PathBuf>,

    /// Merge/rename/map_ignore directives applied while merging
    #[arg(long, global = true)]
    directives: Option<PathBuf>,

    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Undeclared label ids: error (strict, default) or map to ignore (lenient)
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Worker threads for raster processing.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Accept 16-bit label maps, narrowing them to 8 bits.
    #[arg(long = "narrow-16bit", global = true)]
    narrow_16bit: bool,

    /// 16-bit value read as the ignore id when narrowing.
    #[arg(long, global = true)]
    ignore_sentinel: Option<u16>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Strict,
    Lenient,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the universal label-space from taxonomies and directives.
    Merge,
    /// Scan dataset roots, pair images with annotations, reject bad pairs.
    Ingest {
        /// Dataset to scan, as ID=ROOT. Repeatable.
        #[arg(long = "dataset", value_name = "ID=ROOT")]
        datasets: Vec<String>,
        /// Regex with a capture group matched against root-relative image paths.
        #[arg(long)]
        image_pattern: Option<String>,
        /// Regex with a capture group matched against root-relative annotation paths.
        #[arg(long)]
        annotation_pattern: Option<String>,
    },
    /// Assign train/val splits balancing per-class pixel proportions.
    Split {
        /// Manifest TSV written by `ingest`
        #[arg(long)]
        manifest: PathBuf,
        /// Split seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Validation share of each dataset [default: 0.2]
        #[arg(long)]
        fraction: Option<f64>,
        /// Hill-climbing sweep limit; 0 keeps the greedy split [default: 10]
        #[arg(long)]
        sweeps: Option<u32>,
        /// Re-split datasets that already carry a split.
        #[arg(long)]
        resplit: bool,
    },
    /// Remap every annotation of a manifest into universal label PNGs.
    Remap {
        /// Manifest TSV written by `ingest`
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate universal predictions against universal ground truth.
    Eval {
        /// Ground truth root laid out as <dataset>/<...>.png.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction root with the same relative paths.
        #[arg(long)]
        pred: PathBuf,
        /// Universal label-space JSON (instead of taxonomies + directives).
        #[arg(long)]
        space: Option<PathBuf>,
    },
    /// Class-pixel histograms and split divergence of a manifest.
    Stats {
        /// Manifest TSV written by `ingest`
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Dataset root entry of a [`PipelineConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRoot {
    pub id: String,
    pub root: PathBuf,
    #[serde(default)]
    pub image_pattern: Option<String>,
    #[serde(default)]
    pub annotation_pattern: Option<String>,
}

/// Everything a run needs. Relative paths in a config file resolve against
/// the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub taxonomies: Vec<PathBuf>,
    pub directives: Option<PathBuf>,
    pub datasets: Vec<DatasetRoot>,
    pub output: PathBuf,
    pub mode: Strictness,
    pub seed: u64,
    pub fraction: f64,
    pub sweeps: u32,
    /// 0 uses every available core.
    pub workers: usize,
    pub narrow_16bit: bool,
    pub ignore_sentinel: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            taxonomies: Vec::new(),
            directives: None,
            datasets: Vec::new(),
            output: PathBuf::from("."),
            mode: Strictness::Strict,
            seed: 0,
            fraction: DEFAULT_FRACTION,
            sweeps: DEFAULT_SWEEPS,
            workers: 0,
            narrow_16bit: false,
            ignore_sentinel: DEFAULT_IGNORE_SENTINEL,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.taxonomies.iter_mut().for_each(resolve);
        config.directives.as_mut().map(resolve);
        config.datasets.iter_mut().for_each(|d| resolve(&mut d.root));
        resolve(&mut config.output);
        Ok(config)
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            strictness: self.mode,
            narrowing: self
                .narrow_16bit
                .then_some(Narrowing { ignore_sentinel: Some(self.ignore_sentinel) }),
        }
    }

    fn validate(&self) -> CliResult<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(CliError::Usage(format!("fraction {} outside (0, 1)", self.fraction)));
        }
        for path in self.taxonomies.iter().chain(self.directives.as_ref()) {
            require_file(path)?;
        }
        Ok(())
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    fs::metadata(path).map_err(|e| CliError::Data(Error::io(path, e)))?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(Error::io(path, e)))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(Error::io(path, e)))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn to_json_text<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(text)
}

/// Taxonomies, directives and the merged space, loaded together.
struct LabelSetup {
    taxonomies: Vec<DatasetTaxonomy>,
    space: UniversalLabelSpace,
    map: ClassMap,
    digests: BTreeMap<String, String>,
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    }
}

fn load_setup(config: &PipelineConfig) -> CliResult<LabelSetup> {
    if config.taxonomies.is_empty() {
        return Err(CliError::Usage("--taxonomies is required".into()));
    }
    let mut digests = BTreeMap::new();
    let mut taxonomies = Vec::new();
    for path in &config.taxonomies {
        let text = read_text(path)?;
        digests.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        taxonomies.push(parse_taxonomy(&text).map_err(|e| with_path(path, e))?);
    }
    let directives = match &config.directives {
        Some(path) => {
            let text = read_text(path)?;
            digests.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
            parse_directives(&text, &taxonomies).map_err(|e| with_path(path, e))?
        }
        None => Vec::new(),
    };
    let (space, map) = merge_label_spaces(&taxonomies, &directives)?;
    Ok(LabelSetup { taxonomies, space, map, digests })
}

fn load_manifest(path: &Path) -> CliResult<Vec<Record>> {
    let text = read_text(path)?;
    Ok(manifest_from_tsv(&text, path)?)
}

/// Runs the command line and returns the process exit code.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(false)
        .without_time()
        .with_target(false)
        .try_init();

    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}\n\nRun `unilabel --help` for usage.");
            2
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn build_config(common: &CommonArgs) -> CliResult<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::from_json_file(path).map_err(|e| match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other),
        })?,
        None => PipelineConfig::default(),
    };
    if !common.taxonomies.is_empty() {
        config.taxonomies = common.taxonomies.clone();
    }
    if let Some(d) = &common.directives {
        config.directives = Some(d.clone());
    }
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    if let Some(mode) = common.mode {
        config.mode = match mode {
            ModeArg::Strict => Strictness::Strict,
            ModeArg::Lenient => Strictness::Lenient,
        };
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        config.workers = w;
    }
    if common.narrow_16bit {
        config.narrow_16bit = true;
    }
    if let Some(s) = common.ignore_sentinel {
        config.ignore_sentinel = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = build_config(&cli.common)?;
    if let Command::Split { seed, fraction, sweeps, .. } = &cli.command {
        config.seed = seed.unwrap_or(config.seed);
        config.fraction = fraction.unwrap_or(config.fraction);
        config.sweeps = sweeps.unwrap_or(config.sweeps);
    }
    config.validate()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Merge => cmd_merge(&config),
        Command::Ingest { datasets, image_pattern, annotation_pattern } => {
            cmd_ingest(&config, datasets, image_pattern.as_deref(), annotation_pattern.as_deref())
        }
        Command::Split { manifest, resplit, .. } => cmd_split(&config, manifest, *resplit),
        Command::Remap { manifest } => cmd_remap(&config, manifest),
        Command::Eval { gt, pred, space } => cmd_eval(&config, gt, pred, space.as_deref()),
        Command::Stats { manifest } => cmd_stats(&config, manifest),
    })
}

#[derive(Serialize)]
struct MergeSummary {
    classes: usize,
    per_dataset: BTreeMap<String, usize>,
    largest_input: usize,
    expansion_percent: f64,
    inputs_sha256: BTreeMap<String, String>,
}

fn cmd_merge(config: &PipelineConfig) -> CliResult<()> {
    let setup = load_setup(config)?;
    let per_dataset: BTreeMap<String, usize> = setup
        .taxonomies
        .iter()
        .map(|t| (t.dataset_id.clone(), t.evaluation_class_count()))
        .collect();
    let largest = per_dataset.values().copied().max().unwrap_or(0);
    let expansion = label_space_expansion(setup.space.len(), largest);

    let space_path = config.output.join("universal.json");
    write_file(&space_path, setup.space.to_json()?)?;
    let summary = MergeSummary {
        classes: setup.space.len(),
        per_dataset,
        largest_input: largest,
        expansion_percent: expansion,
        inputs_sha256: setup.digests.clone(),
    };
    write_file(&config.output.join("merge.json"), to_json_text(&summary)?)?;

    info!(classes = setup.space.len(), path = %space_path.display(), "wrote universal label-space");
    say!(
        "universal label-space: {} classes ({:+.0}% vs largest input of {} classes)",
        setup.space.len(),
        expansion,
        largest
    );
    for class in &setup.space.classes {
        let sources: Vec<String> = class
            .contributors
            .iter()
            .map(|r| {
                let name = setup
                    .taxonomies
                    .iter()
                    .find(|t| t.dataset_id == r.dataset)
                    .and_then(|t| t.class(r.local_id))
                    .map_or(String::new(), |c| c.name.clone());
                format!("{}:{} \"{}\"", r.dataset, r.local_id, name)
            })
            .collect();
        say!("{:>3}  {:<30} <- {}", class.id, class.name, sources.join(", "));
    }
    Ok(())
}

fn parse_dataset_arg(arg: &str) -> CliResult<(String, PathBuf)> {
    let (id, root) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--dataset expects ID=ROOT, got '{arg}'")))?;
    Ok((id.to_string(), PathBuf::from(root)))
}

#[derive(Serialize)]
struct IngestSummary {
    datasets: BTreeMap<String, IngestCounts>,
}

#[derive(Serialize, Default)]
struct IngestCounts {
    scanned: usize,
    kept: usize,
    rejected: BTreeMap<String, usize>,
}

fn cmd_ingest(
    config: &PipelineConfig,
    dataset_args: &[String],
    image_pattern: Option<&str>,
    annotation_pattern: Option<&str>,
) -> CliResult<()> {
    let mut roots = config.datasets.clone();
    for arg in dataset_args {
        let (id, root) = parse_dataset_arg(arg)?;
        roots.retain(|d| d.id != id);
        roots.push(DatasetRoot { id, root, image_pattern: None, annotation_pattern: None });
    }
    if roots.is_empty() {
        return Err(CliError::Usage("ingest needs at least one --dataset ID=ROOT".into()));
    }
    let known: Option<Vec<String>> = if config.taxonomies.is_empty() {
        None
    } else {
        Some(load_setup(config)?.taxonomies.into_iter().map(|t| t.dataset_id).collect())
    };

    let mut manifest = Manifest::default();
    let mut summary = IngestSummary { datasets: BTreeMap::new() };
    for root in &roots {
        if let Some(known) = &known {
            if !known.contains(&root.id) {
                return Err(CliError::Data(Error::UnknownDataset(root.id.clone())));
            }
        }
        let image_re = image_pattern.or(root.image_pattern.as_deref());
        let annotation_re = annotation_pattern.or(root.annotation_pattern.as_deref());
        let rule = match (image_re, annotation_re) {
            (None, None) => PairingRule::default(),
            (Some(i), Some(a)) => PairingRule::new(i, a).map_err(|e| CliError::Usage(e.to_string()))?,
            _ => {
                return Err(CliError::Usage(
                    "--image-pattern and --annotation-pattern go together".into(),
                ))
            }
        };
        let scanned = scan_dataset(&root.id, &root.root, &rule)?;
        let total = scanned.scanned_count();
        let checked = validate_pairs(scanned);
        let mut counts = IngestCounts { scanned: total, kept: checked.records.len(), ..Default::default() };
        for r in &checked.rejected {
            *counts.rejected.entry(r.reason.to_string()).or_default() += 1;
        }
        info!(dataset = %root.id, scanned = total, kept = counts.kept, "ingested dataset");
        summary.datasets.insert(root.id.clone(), counts);
        manifest.extend(checked);
    }

    write_file(&config.output.join("manifest.tsv"), manifest_to_tsv(&manifest.records)?)?;
    write_file(&config.output.join("rejected.tsv"), rejected_to_tsv(&manifest.rejected)?)?;
    write_file(&config.output.join("ingest.json"), to_json_text(&summary)?)?;
    for (id, counts) in &summary.datasets {
        say!(
            "{id}: {} scanned, {} kept, {} rejected",
            counts.scanned,
            counts.kept,
            counts.scanned - counts.kept
        );
    }
    Ok(())
}

fn group_by_dataset(records: &[Record]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.dataset_id.clone()).or_default().push(i);
    }
    groups
}

fn cmd_split(config: &PipelineConfig, manifest_path: &Path, resplit: bool) -> CliResult<()> {
    let setup = load_setup(config)?;
    let mut records = load_manifest(manifest_path)?;
    let loader = UniversalLoader::new(&setup.taxonomies, &setup.map, config.decode_options())?;

    let mut sidecar: BTreeMap<String, SplitSidecar> = BTreeMap::new();
    for (dataset, indices) in group_by_dataset(&records) {
        let assigned = indices.iter().filter(|&&i| records[i].split != Split::Unassigned).count();
        if assigned == indices.len() && !resplit {
            info!(dataset = %dataset, "keeping existing split");
            continue;
        }
        if assigned > 0 && !resplit {
            return Err(CliError::Data(Error::SplitRequest(format!(
                "dataset '{dataset}' is partially split; pass --resplit to redo it"
            ))));
        }
        let subset: Vec<Record> = indices.iter().map(|&i| records[i].clone()).collect();
        let histograms = record_histograms(&subset, &loader)?;
        let items: Vec<SplitItem> = subset
            .iter()
            .zip(histograms)
            .map(|(r, h)| SplitItem::new(r.key(), h))
            .collect();
        let plan = propose_split(&items, config.fraction, config.seed, config.sweeps)?;
        for &i in &indices {
            records[i].split = if plan.val_records.contains(&records[i].key()) {
                Split::Val
            } else {
                Split::Train
            };
        }
        info!(
            dataset = %dataset,
            val = plan.val_records.len(),
            train = plan.train_records.len(),
            divergence = plan.divergence,
            "split dataset"
        );
        say!(
            "{dataset}: {} val / {} train, divergence {:.6}",
            plan.val_records.len(),
            plan.train_records.len(),
            plan.divergence
        );
        sidecar.insert(dataset, plan.sidecar());
    }
    write_file(&config.output.join("manifest.tsv"), manifest_to_tsv(&records)?)?;
    write_file(&config.output.join("split.json"), to_json_text(&sidecar)?)?;
    Ok(())
}

/// Output path of a remapped annotation.
pub fn universal_annotation_path(out: &Path, record: &Record) -> PathBuf {
    let stem = record
        .annotation_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.join(&record.dataset_id).join(format!("{stem}.universal.png"))
}

fn cmd_remap(config: &PipelineConfig, manifest_path: &Path) -> CliResult<()> {
    let setup = load_setup(config)?;
    let records = load_manifest(manifest_path)?;
    let loader = UniversalLoader::new(&setup.taxonomies, &setup.map, config.decode_options())?;
    let k = setup.space.len();

    let targets: Vec<PathBuf> = records.iter().map(|r| universal_annotation_path(&config.output, r)).collect();
    let mut seen: BTreeMap<&Path, &Record> = BTreeMap::new();
    for (target, record) in targets.iter().zip(&records) {
        if let Some(other) = seen.insert(target.as_path(), record) {
            return Err(CliError::Data(Error::Config(format!(
                "{} and {} both map to {}",
                other.annotation_path.display(),
                record.annotation_path.display(),
                target.display()
            ))));
        }
    }

    records
        .par_iter()
        .zip(&targets)
        .try_for_each(|(record, target)| -> CliResult<()> {
            let raster = loader.load(&record.dataset_id, &record.annotation_path)?;
            let png = encode_universal(&raster, k)?;
            write_file(target, png)
        })?;

    let remapped: Vec<Record> = records
        .iter()
        .zip(&targets)
        .map(|(r, t)| Record { annotation_path: t.clone(), ..r.clone() })
        .collect();
    write_file(&config.output.join("manifest.universal.tsv"), manifest_to_tsv(&remapped)?)?;
    write_file(&config.output.join("universal.json"), setup.space.to_json()?)?;
    info!(records = records.len(), "remapped annotations");
    say!("remapped {} annotations into {} universal classes", records.len(), k);
    Ok(())
}

fn collect_label_files(root: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    fs::metadata(root).map_err(|e| Error::io(root, e))?;
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(e.path().unwrap_or(root).to_path_buf(), e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .expect("walkdir stays under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        files.push((rel, path.to_path_buf()));
    }
    Ok(files)
}

fn cmd_eval(config: &PipelineConfig, gt_root: &Path, pred_root: &Path, space_path: Option<&Path>) -> CliResult<()> {
    let space = match space_path {
        Some(path) => UniversalLabelSpace::from_json(&read_text(path)?)?,
        None => load_setup(config)?.space,
    };
    let k = space.len();
    let files = collect_label_files(gt_root)?;
    if files.is_empty() {
        return Err(CliError::Data(Error::Config(format!("no PNG label maps under {}", gt_root.display()))));
    }
    let datasets = space.datasets();
    let mut jobs = Vec::with_capacity(files.len());
    for (rel, gt_path) in files {
        let dataset = rel.split('/').next().unwrap_or_default().to_string();
        let index = datasets
            .iter()
            .position(|d| *d == dataset)
            .filter(|_| rel.contains('/'))
            .ok_or_else(|| CliError::Data(Error::UnknownDataset(format!("{dataset} (from {rel})"))))?;
        let pred_path = pred_root.join(&rel);
        jobs.push((index, rel, gt_path, pred_path));
    }
    let reachable: Vec<_> = datasets.iter().map(|d| space.reachable(d)).collect();

    struct Outcome {
        dataset: usize,
        confusion: ConfusionMatrix,
        exclusivity: ExclusivityTally,
        digest: String,
    }
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|(dataset, rel, gt_path, pred_path)| -> CliResult<Outcome> {
            let gt_bytes = fs::read(gt_path).map_err(|e| Error::io(gt_path, e))?;
            let pred_bytes = fs::read(pred_path).map_err(|e| Error::io(pred_path, e))?;
            let gt = read_universal(gt_path, k)?;
            let pred = read_universal(pred_path, k)?;
            let mut confusion = ConfusionMatrix::new(k);
            confusion.accumulate(&gt, &pred).map_err(|e| Error::Decode {
                path: pred_path.clone(),
                message: e.to_string(),
            })?;
            let mut exclusivity = ExclusivityTally::default();
            exclusivity.add(&pred, &reachable[*dataset]);
            let mut hasher = Sha256::new();
            hasher.update(rel.as_bytes());
            hasher.update(sha256_hex(&gt_bytes));
            hasher.update(sha256_hex(&pred_bytes));
            Ok(Outcome { dataset: *dataset, confusion, exclusivity, digest: hex::encode(hasher.finalize()) })
        })
        .collect::<CliResult<_>>()?;

    let mut tallies: Vec<Option<DomainTally>> = vec![None; datasets.len()];
    let mut hashers: Vec<Sha256> = vec![Sha256::new(); datasets.len()];
    for outcome in outcomes {
        hashers[outcome.dataset].update(&outcome.digest);
        let slot = &mut tallies[outcome.dataset];
        *slot = Some(match slot.take() {
            None => DomainTally {
                dataset: datasets[outcome.dataset].clone(),
                confusion: outcome.confusion,
                exclusivity: outcome.exclusivity,
            },
            Some(t) => DomainTally {
                confusion: t.confusion.merge(&outcome.confusion)?,
                exclusivity: t.exclusivity.merge(outcome.exclusivity),
                dataset: t.dataset,
            },
        });
    }
    let mut digests = BTreeMap::new();
    let mut present = Vec::new();
    for (i, (tally, hasher)) in tallies.into_iter().zip(hashers).enumerate() {
        if let Some(t) = tally {
            digests.insert(datasets[i].clone(), hex::encode(hasher.finalize()));
            present.push(t);
        }
    }
    let report = per_domain_report(&space, &present)?;
    let table = report.to_table();
    write_file(&config.output.join("eval.json"), report.to_json_with_digests(&digests)?)?;
    write_file(&config.output.join("eval.txt"), &table)?;
    info!(datasets = present.len(), "wrote evaluation report");
    say!("{}", table.trim_end_matches('\n'));
    Ok(())
}

#[derive(Serialize)]
struct SectionStats {
    records: usize,
    histogram: HistogramReport,
    splits: BTreeMap<String, HistogramReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    divergence: Option<f64>,
}

#[derive(Serialize)]
struct StatsReport {
    datasets: BTreeMap<String, SectionStats>,
    universal: SectionStats,
    class_names: BTreeMap<String, String>,
    inputs_sha256: BTreeMap<String, String>,
}

fn section(records: &[&Record], histograms: &[&ClassHistogram]) -> CliResult<SectionStats> {
    let mut total = ClassHistogram::default();
    let mut by_split: BTreeMap<Split, ClassHistogram> = BTreeMap::new();
    for (r, h) in records.iter().zip(histograms) {
        total.merge(h);
        by_split.entry(r.split).or_default().merge(h);
    }
    let divergence = match (by_split.get(&Split::Val), by_split.get(&Split::Train)) {
        (Some(v), Some(t)) => Some(split_divergence(v, t)?),
        _ => None,
    };
    Ok(SectionStats {
        records: records.len(),
        histogram: total.report(),
        splits: by_split.iter().map(|(s, h)| (s.to_string(), h.report())).collect(),
        divergence,
    })
}

fn cmd_stats(config: &PipelineConfig, manifest_path: &Path) -> CliResult<()> {
    let setup = load_setup(config)?;
    let records = load_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(CliError::Data(Error::Manifest {
            path: manifest_path.to_path_buf(),
            line: 0,
            message: "manifest has no records".into(),
        }));
    }
    let loader = UniversalLoader::new(&setup.taxonomies, &setup.map, config.decode_options())?;
    let histograms = record_histograms(&records, &loader)?;
    debug_assert_eq!(
        histograms.iter().fold(ClassHistogram::default(), |a, h| a.merged(h)),
        class_histogram(&records, &loader)?
    );

    let mut datasets = BTreeMap::new();
    for (dataset, indices) in group_by_dataset(&records) {
        let rs: Vec<&Record> = indices.iter().map(|&i| &records[i]).collect();
        let hs: Vec<&ClassHistogram> = indices.iter().map(|&i| &histograms[i]).collect();
        datasets.insert(dataset, section(&rs, &hs)?);
    }
    let all_records: Vec<&Record> = records.iter().collect();
    let all_histograms: Vec<&ClassHistogram> = histograms.iter().collect();
    let universal = section(&all_records, &all_histograms)?;

    let mut inputs = setup.digests.clone();
    inputs.insert(manifest_path.display().to_string(), file_digest(manifest_path)?);
    let report = StatsReport {
        datasets,
        universal,
        class_names: setup.space.classes.iter().map(|c| (c.id.to_string(), c.name.clone())).collect(),
        inputs_sha256: inputs,
    };
    write_file(&config.output.join("stats.json"), to_json_text(&report)?)?;

    let print_section = |title: &str, s: &SectionStats| {
        say!(
            "[{title}] {} records, {} evaluation pixels, {} ignored",
            s.records, s.histogram.total_eval_pixels, s.histogram.ignored_pixels
        );
        if let Some(d) = s.divergence {
            say!("  val/train divergence: {d:.6}");
        }
        let mut rows: Vec<(&String, &u64)> = s.histogram.counts.iter().collect();
        rows.sort_by_key(|(id, _)| id.parse::<u16>().unwrap_or(u16::MAX));
        for (id, count) in rows {
            let name = report.class_names.get(id).map_or("?", String::as_str);
            let share = *count as f64 / s.histogram.total_eval_pixels as f64;
            say!("  {id:>3} {name:<30} {count:>12} {:>7}%", crate::metrics::format_percent(share));
        }
    };
    for (dataset, s) in &report.datasets {
        print_section(dataset, s);
    }
    print_section("universal", &report.universal);
    info!(records = records.len(), "wrote stats");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.json");
        fs::write(
            &path,
            r#"{"taxonomies": ["a.txt"], "directives": "/abs/d.txt", "seed": 7, "mode": "lenient",
                "datasets": [{"id": "suim", "root": "data/suim"}]}"#,
        )
        .unwrap();
        let config = PipelineConfig::from_json_file(&path).unwrap();
        assert_eq!(config.taxonomies, vec![dir.path().join("a.txt")]);
        assert_eq!(config.directives, Some(PathBuf::from("/abs/d.txt")));
        assert_eq!(config.datasets[0].root, dir.path().join("data/suim"));
        assert_eq!(config.seed, 7);
        assert_eq!(config.mode, Strictness::Lenient);
        assert_eq!(config.fraction, DEFAULT_FRACTION);
        assert_eq!(config.sweeps, DEFAULT_SWEEPS);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.json");
        fs::write(&path, r#"{"taxonomy": []}"#).unwrap();
        assert!(matches!(PipelineConfig::from_json_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn fraction_validation_is_usage() {
        let config = PipelineConfig { fraction: 1.5, ..Default::default() };
        assert!(matches!(config.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn dataset_arg() {
        assert_eq!(parse_dataset_arg("suim=/d/suim").unwrap(), ("suim".into(), PathBuf::from("/d/suim")));
        assert!(matches!(parse_dataset_arg("suim"), Err(CliError::Usage(_))));
    }

    #[test]
    fn universal_path_layout() {
        let r = Record {
            dataset_id: "suim".into(),
            image_path: "x/images/d_r_1_.jpg".into(),
            annotation_path: "x/masks/d_r_1_.bmp".into(),
            width: 1,
            height: 1,
            split: Split::Train,
        };
        assert_eq!(
            universal_annotation_path(Path::new("out"), &r),
            PathBuf::from("out/suim/d_r_1_.universal.png")
        );
    }
}
