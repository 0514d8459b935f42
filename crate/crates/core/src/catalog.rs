//! Dataset scanning, pair validation, manifests and class histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::raster::{read_label_image, AnnotationRaster, UniversalLoader};
use crate::taxonomy::IGNORE_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One image with its annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub dataset_id: String,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub split: Split,
}

impl Record {
    /// Stable key used for ordering and split plans.
    pub fn key(&self) -> String {
        format!("{}:{}", self.dataset_id, self.image_path.display())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Unpaired,
    SizeMismatch,
    Corrupt,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Unpaired => "unpaired",
            RejectReason::SizeMismatch => "size-mismatch",
            RejectReason::Corrupt => "corrupt",
        })
    }
}

impl FromStr for RejectReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unpaired" => Ok(RejectReason::Unpaired),
            "size-mismatch" => Ok(RejectReason::SizeMismatch),
            "corrupt" => Ok(RejectReason::Corrupt),
            other => Err(format!("unknown reject reason '{other}'")),
        }
    }
}

/// A file set that did not make it into the manifest. Unpaired entries lack
/// one of the two paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub dataset_id: String,
    pub image_path: Option<PathBuf>,
    pub annotation_path: Option<PathBuf>,
    pub reason: RejectReason,
    pub detail: String,
}

impl Rejected {
    fn from_record(record: Record, reason: RejectReason, detail: String) -> Self {
        Rejected {
            dataset_id: record.dataset_id,
            image_path: Some(record.image_path),
            annotation_path: Some(record.annotation_path),
            reason,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub rejected: Vec<Rejected>,
}

impl Manifest {
    pub fn scanned_count(&self) -> usize {
        self.records.len() + self.rejected.len()
    }

    pub fn extend(&mut self, other: Manifest) {
        self.records.extend(other.records);
        self.rejected.extend(other.rejected);
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.dataset_id) {
                seen.push(r.dataset_id.clone());
            }
        }
        seen
    }
}

/// Pairs images with annotations through the first capture group of two
/// regular expressions matched against root-relative paths (with `/`).
#[derive(Clone, Debug)]
pub struct PairingRule {
    image: Regex,
    annotation: Regex,
}

impl PairingRule {
    pub fn new(image_pattern: &str, annotation_pattern: &str) -> Result<Self> {
        let compile = |pattern: &str| -> Result<Regex> {
            let re = Regex::new(pattern).map_err(|e| Error::PairingRule(e.to_string()))?;
            if re.captures_len() < 2 {
                return Err(Error::PairingRule(format!("pattern '{pattern}' has no capture group")));
            }
            Ok(re)
        };
        Ok(PairingRule { image: compile(image_pattern)?, annotation: compile(annotation_pattern)? })
    }

    fn key(re: &Regex, rel: &str) -> Option<String> {
        let caps = re.captures(rel)?;
        let whole = caps.get(0)?;
        if whole.start() != 0 || whole.end() != rel.len() {
            return None;
        }
        Some(
            caps.iter()
                .skip(1)
                .map(|m| m.map_or("", |m| m.as_str()))
                .collect::<Vec<_>>()
                .join("\u{1f}"),
        )
    }
}

impl Default for PairingRule {
    fn default() -> Self {
        PairingRule::new(
            r"images/(.+)\.(?:jpg|jpeg|png|bmp)",
            r"annotations/(.+)\.(?:png|bmp)",
        )
        .expect("default pairing patterns compile")
    }
}

/// Reads width and height from an image header.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

/// Walks `root` and pairs files according to `rule`. Records come out in
/// lexicographic path order.
pub fn scan_dataset(dataset_id: &str, root: &Path, rule: &PairingRule) -> Result<Manifest> {
    let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }

    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut annotations: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir stays under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if let Some(key) = PairingRule::key(&rule.image, &rel) {
            images.insert(key, entry.path().to_path_buf());
        } else if let Some(key) = PairingRule::key(&rule.annotation, &rel) {
            annotations.insert(key, entry.path().to_path_buf());
        }
    }

    let mut manifest = Manifest::default();
    for (key, image_path) in &images {
        let Some(annotation_path) = annotations.get(key) else {
            manifest.rejected.push(Rejected {
                dataset_id: dataset_id.to_string(),
                image_path: Some(image_path.clone()),
                annotation_path: None,
                reason: RejectReason::Unpaired,
                detail: "no annotation".into(),
            });
            continue;
        };
        match image_dimensions(image_path) {
            Ok((width, height)) => manifest.records.push(Record {
                dataset_id: dataset_id.to_string(),
                image_path: image_path.clone(),
                annotation_path: annotation_path.clone(),
                width,
                height,
                split: Split::Unassigned,
            }),
            Err(e) => manifest.rejected.push(Rejected {
                dataset_id: dataset_id.to_string(),
                image_path: Some(image_path.clone()),
                annotation_path: Some(annotation_path.clone()),
                reason: RejectReason::Corrupt,
                detail: e.to_string(),
            }),
        }
    }
    for (key, annotation_path) in &annotations {
        if !images.contains_key(key) {
            manifest.rejected.push(Rejected {
                dataset_id: dataset_id.to_string(),
                image_path: None,
                annotation_path: Some(annotation_path.clone()),
                reason: RejectReason::Unpaired,
                detail: "no image".into(),
            });
        }
    }
    manifest.records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(manifest)
}

enum PairCheck {
    Keep,
    Reject(RejectReason, String),
}

fn check_pair(record: &Record) -> PairCheck {
    let image = match image_dimensions(&record.image_path) {
        Ok(dims) => dims,
        Err(e) => return PairCheck::Reject(RejectReason::Corrupt, e.to_string()),
    };
    let annotation = match read_label_image(&record.annotation_path) {
        Ok(img) => (img.width, img.height),
        Err(e) => return PairCheck::Reject(RejectReason::Corrupt, e.to_string()),
    };
    if image != annotation {
        return PairCheck::Reject(
            RejectReason::SizeMismatch,
            format!(
                "image {}x{} vs annotation {}x{}",
                image.0, image.1, annotation.0, annotation.1
            ),
        );
    }
    PairCheck::Keep
}

/// Moves pairs whose image and annotation sizes differ (or that fail to
/// decode) into the rejected list.
pub fn validate_pairs(manifest: Manifest) -> Manifest {
    let checks: Vec<PairCheck> = manifest.records.par_iter().map(check_pair).collect();
    let mut out = Manifest { records: Vec::new(), rejected: manifest.rejected };
    for (record, check) in manifest.records.into_iter().zip(checks) {
        match check {
            PairCheck::Keep => out.records.push(record),
            PairCheck::Reject(reason, detail) => {
                out.rejected.push(Rejected::from_record(record, reason, detail))
            }
        }
    }
    out
}

/// Pixel counts per class id. Ignore pixels are tallied separately.
#[derive(Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    counts: Box<[u64; 256]>,
    ignored: u64,
}

impl Default for ClassHistogram {
    fn default() -> Self {
        ClassHistogram { counts: Box::new([0; 256]), ignored: 0 }
    }
}

impl fmt::Debug for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassHistogram")
            .field("counts", &self.nonzero().collect::<BTreeMap<_, _>>())
            .field("ignored", &self.ignored)
            .finish()
    }
}

impl ClassHistogram {
    pub fn from_ids(ids: &[u8]) -> Self {
        let mut h = ClassHistogram::default();
        h.add_ids(ids);
        h
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (u8, u64)>) -> Self {
        let mut h = ClassHistogram::default();
        for (id, n) in counts {
            if id == IGNORE_ID {
                h.ignored += n;
            } else {
                h.counts[usize::from(id)] += n;
            }
        }
        h
    }

    pub fn add_ids(&mut self, ids: &[u8]) {
        // four partial tables to break the store-to-load dependency
        let mut partial = [[0u64; 256]; 4];
        let mut chunks = ids.chunks_exact(4);
        for c in &mut chunks {
            partial[0][usize::from(c[0])] += 1;
            partial[1][usize::from(c[1])] += 1;
            partial[2][usize::from(c[2])] += 1;
            partial[3][usize::from(c[3])] += 1;
        }
        for &v in chunks.remainder() {
            partial[0][usize::from(v)] += 1;
        }
        for table in &partial {
            for (slot, n) in self.counts.iter_mut().zip(table.iter()) {
                *slot += n;
            }
        }
        self.ignored += self.counts[usize::from(IGNORE_ID)];
        self.counts[usize::from(IGNORE_ID)] = 0;
    }

    pub fn count(&self, id: u8) -> u64 {
        if id == IGNORE_ID {
            0
        } else {
            self.counts[usize::from(id)]
        }
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total_eval_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Non-zero evaluation classes in id order.
    pub fn nonzero(&self) -> impl Iterator<Item = (u8, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(id, &n)| (id as u8, n))
    }

    pub fn merge(&mut self, other: &ClassHistogram) {
        for (slot, n) in self.counts.iter_mut().zip(other.counts.iter()) {
            *slot += n;
        }
        self.ignored += other.ignored;
    }

    pub fn merged(mut self, other: &ClassHistogram) -> Self {
        self.merge(other);
        self
    }

    /// Serializable form: `{class_id: count}` plus totals.
    pub fn report(&self) -> HistogramReport {
        HistogramReport {
            counts: self.nonzero().map(|(id, n)| (id.to_string(), n)).collect(),
            total_eval_pixels: self.total_eval_pixels(),
            ignored_pixels: self.ignored,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub counts: BTreeMap<String, u64>,
    pub total_eval_pixels: u64,
    pub ignored_pixels: u64,
}

impl From<&AnnotationRaster> for ClassHistogram {
    fn from(raster: &AnnotationRaster) -> Self {
        ClassHistogram::from_ids(raster.ids())
    }
}

/// Universal-space histogram of every record, in record order.
pub fn record_histograms(records: &[Record], loader: &UniversalLoader) -> Result<Vec<ClassHistogram>> {
    records
        .par_iter()
        .map(|r| {
            loader
                .load(&r.dataset_id, &r.annotation_path)
                .map(|raster| ClassHistogram::from(&raster))
        })
        .collect()
}

/// Summed universal-space histogram over `records`.
pub fn class_histogram(records: &[Record], loader: &UniversalLoader) -> Result<ClassHistogram> {
    records
        .par_iter()
        .map(|r| {
            loader
                .load(&r.dataset_id, &r.annotation_path)
                .map(|raster| ClassHistogram::from(&raster))
        })
        .try_reduce(ClassHistogram::default, |a, b| Ok(a.merged(&b)))
}

const MANIFEST_HEADER: &str = "#dataset_id\timage_path\tannotation_path\twidth\theight\tsplit";
const REJECTED_HEADER: &str = "#dataset_id\timage_path\tannotation_path\treason\tdetail";

fn tsv_field(path: &Path) -> Result<String> {
    let text = path.to_str().ok_or_else(|| Error::Config(format!("non UTF-8 path {}", path.display())))?;
    if text.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!("path {text:?} contains a tab or newline")));
    }
    Ok(text.to_string())
}

/// Tab-separated manifest lines with a `#` header row.
pub fn manifest_to_tsv(records: &[Record]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.dataset_id,
            tsv_field(&r.image_path)?,
            tsv_field(&r.annotation_path)?,
            r.width,
            r.height,
            r.split
        ));
    }
    Ok(out)
}

pub fn rejected_to_tsv(rejected: &[Rejected]) -> Result<String> {
    let mut out = String::from(REJECTED_HEADER);
    out.push('\n');
    for r in rejected {
        let path = |p: &Option<PathBuf>| p.as_deref().map(tsv_field).transpose().map(Option::unwrap_or_default);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.dataset_id,
            path(&r.image_path)?,
            path(&r.annotation_path)?,
            r.reason,
            r.detail.replace(['\t', '\n', '\r'], " ")
        ));
    }
    Ok(out)
}

/// Parses manifest lines. `source` only labels errors.
pub fn manifest_from_tsv(text: &str, source: &Path) -> Result<Vec<Record>> {
    let err = |line: usize, message: String| Error::Manifest { path: source.to_path_buf(), line, message };
    let mut records = Vec::new();
    let mut keys = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(line_no, format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let dim = |s: &str| s.parse::<u32>().map_err(|_| err(line_no, format!("invalid dimension '{s}'")));
        let record = Record {
            dataset_id: fields[0].to_string(),
            image_path: PathBuf::from(fields[1]),
            annotation_path: PathBuf::from(fields[2]),
            width: dim(fields[3])?,
            height: dim(fields[4])?,
            split: fields[5].parse().map_err(|e: String| err(line_no, e))?,
        };
        if !keys.insert(record.key()) {
            return Err(err(line_no, format!("duplicate record {}", record.key())));
        }
        records.push(record);
    }
    Ok(records)
}
