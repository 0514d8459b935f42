//! Confusion matrices, per-class IoU, mIoU and per-domain reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{AnnotationRaster, SpaceTag};
use crate::taxonomy::{UniversalLabelSpace, IGNORE_ID};

/// `counts[g][p]` is the number of pixels with ground truth `g` predicted as
/// `p`. Pixels whose ground truth is the ignore id are never counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

fn require_universal(raster: &AnnotationRaster, what: &str) -> Result<()> {
    if raster.space() != &SpaceTag::Universal {
        return Err(Error::SpaceMismatch {
            expected: format!("universal {what}"),
            found: raster.space().to_string(),
        });
    }
    Ok(())
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Adds one (ground truth, prediction) pair. The matrix is untouched when
    /// an error is returned.
    pub fn accumulate(&mut self, gt: &AnnotationRaster, pred: &AnnotationRaster) -> Result<()> {
        require_universal(gt, "ground truth")?;
        require_universal(pred, "prediction")?;
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(Error::DimensionMismatch {
                left_w: gt.width(),
                left_h: gt.height(),
                right_w: pred.width(),
                right_h: pred.height(),
            });
        }
        let k = self.k;
        if let Some(&id) = gt.ids().iter().find(|&&g| g != IGNORE_ID && usize::from(g) >= k) {
            return Err(Error::OutOfSpace { id, k });
        }
        // predictions only matter where the ground truth is counted
        if let Some((_, &id)) = gt
            .ids()
            .iter()
            .zip(pred.ids())
            .find(|&(&g, &p)| g != IGNORE_ID && usize::from(p) >= k)
        {
            return Err(Error::OutOfSpace { id, k });
        }
        for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
            if g != IGNORE_ID {
                self.counts[usize::from(g) * k + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.k != other.k {
            return Err(Error::ClassCountMismatch(self.k, other.k));
        }
        Ok(ConfusionMatrix {
            k: self.k,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }
}

pub fn merge_confusions(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<ConfusionMatrix> {
    a.merge(b)
}

/// `TP / (TP + FP + FN)` per class; `None` when the union is empty.
pub fn iou_per_class(m: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..m.k)
        .map(|c| {
            let tp = m.true_positives(c);
            let union = tp + m.false_positives(c) + m.false_negatives(c);
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean of the defined IoUs inside `subset` (all classes when `None`).
pub fn mean_iou(m: &ConfusionMatrix, subset: Option<&BTreeSet<u8>>) -> Result<f64> {
    IoUReport::new(m, subset).map(|r| r.mean_iou)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// Defined IoUs of the evaluated classes.
    pub per_class: BTreeMap<u8, f64>,
    pub mean_iou: f64,
    pub evaluated_classes: BTreeSet<u8>,
}

impl IoUReport {
    pub fn new(m: &ConfusionMatrix, subset: Option<&BTreeSet<u8>>) -> Result<Self> {
        let evaluated_classes: BTreeSet<u8> = match subset {
            Some(s) => s.iter().copied().filter(|&c| usize::from(c) < m.k).collect(),
            None => (0..m.k).map(|c| c as u8).collect(),
        };
        let ious = iou_per_class(m);
        let per_class: BTreeMap<u8, f64> = evaluated_classes
            .iter()
            .filter_map(|&c| ious[usize::from(c)].map(|v| (c, v)))
            .collect();
        if per_class.is_empty() {
            return Err(Error::NoDefinedIou);
        }
        let mean_iou = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(IoUReport { per_class, mean_iou, evaluated_classes })
    }
}

/// Pixels predicted inside vs. outside a dataset's reachable classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExclusivityTally {
    pub inside: u64,
    pub total: u64,
}

impl ExclusivityTally {
    pub fn add(&mut self, pred: &AnnotationRaster, reachable: &BTreeSet<u8>) {
        let mut mask = [false; 256];
        for &c in reachable {
            mask[usize::from(c)] = true;
        }
        for &p in pred.ids() {
            if p != IGNORE_ID {
                self.total += 1;
                self.inside += u64::from(mask[usize::from(p)]);
            }
        }
    }

    pub fn merge(self, other: ExclusivityTally) -> ExclusivityTally {
        ExclusivityTally { inside: self.inside + other.inside, total: self.total + other.total }
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.inside as f64 / self.total as f64)
    }
}

/// Fraction of non-ignore predicted pixels whose class is in `reachable`.
pub fn domain_exclusivity(pred: &AnnotationRaster, reachable: &BTreeSet<u8>) -> Result<f64> {
    require_universal(pred, "prediction")?;
    let mut tally = ExclusivityTally::default();
    tally.add(pred, reachable);
    tally
        .ratio()
        .ok_or_else(|| Error::EmptyHistogram("prediction has no non-ignore pixels".into()))
}

/// Per-dataset accumulation input for [`per_domain_report`].
#[derive(Clone, Debug)]
pub struct DomainTally {
    pub dataset: String,
    pub confusion: ConfusionMatrix,
    pub exclusivity: ExclusivityTally,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEvaluation {
    pub dataset: String,
    pub miou: f64,
    /// Every reachable class; `None` where the IoU is undefined.
    pub per_class: BTreeMap<u8, Option<f64>>,
    pub exclusivity: Option<f64>,
    pub evaluated_pixels: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainReport {
    pub class_names: Vec<String>,
    pub datasets: Vec<DatasetEvaluation>,
}

/// JSON shape of one dataset entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub miou: f64,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub exclusivity: Option<f64>,
    pub averaged_over: String,
    pub evaluated_pixels: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inputs_sha256: Option<String>,
}

/// Evaluates each dataset over the universal classes it can reach. The full
/// matrix is kept, so out-of-domain predictions still count as false
/// negatives of the true class.
pub fn per_domain_report(space: &UniversalLabelSpace, tallies: &[DomainTally]) -> Result<DomainReport> {
    let mut datasets = Vec::with_capacity(tallies.len());
    for tally in tallies {
        if tally.confusion.k() != space.len() {
            return Err(Error::ClassCountMismatch(tally.confusion.k(), space.len()));
        }
        if tally.confusion.total() == 0 {
            return Err(Error::EmptyHistogram(format!("dataset '{}' accumulated no pixels", tally.dataset)));
        }
        let reachable = space.reachable(&tally.dataset);
        let report = IoUReport::new(&tally.confusion, Some(&reachable))?;
        let per_class = reachable
            .iter()
            .map(|&c| (c, report.per_class.get(&c).copied()))
            .collect();
        datasets.push(DatasetEvaluation {
            dataset: tally.dataset.clone(),
            miou: report.mean_iou,
            per_class,
            exclusivity: tally.exclusivity.ratio(),
            evaluated_pixels: tally.confusion.total(),
        });
    }
    Ok(DomainReport {
        class_names: space.classes.iter().map(|c| c.name.clone()).collect(),
        datasets,
    })
}

/// Rounds a ratio to a percentage with two decimals, half-up.
pub fn format_percent(ratio: f64) -> String {
    let hundredths = (ratio * 10_000.0 + 0.5).floor();
    format!("{:.2}", hundredths / 100.0)
}

impl DomainReport {
    pub fn entries(&self) -> BTreeMap<String, DatasetEntry> {
        self.datasets
            .iter()
            .map(|d| {
                let per_class = d
                    .per_class
                    .iter()
                    .map(|(&c, &v)| (self.class_names[usize::from(c)].clone(), v))
                    .collect();
                (
                    d.dataset.clone(),
                    DatasetEntry {
                        miou: d.miou,
                        per_class,
                        exclusivity: d.exclusivity,
                        averaged_over: "reachable-classes".into(),
                        evaluated_pixels: d.evaluated_pixels,
                        inputs_sha256: None,
                    },
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_digests(&BTreeMap::new())
    }

    pub fn to_json_with_digests(&self, digests: &BTreeMap<String, String>) -> Result<String> {
        let mut entries = self.entries();
        for (dataset, entry) in entries.iter_mut() {
            entry.inputs_sha256 = digests.get(dataset).cloned();
        }
        let mut text = serde_json::to_string_pretty(&entries)?;
        text.push('\n');
        Ok(text)
    }

    /// Plain-text tables: mIoU per dataset, then per-class IoU with one
    /// column per dataset (`-` where a class is unreachable, `n/a` where
    /// undefined).
    pub fn to_table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.datasets.iter().map(|d| d.dataset.clone()));

        let mut rows = vec![header.clone()];
        let mut miou = vec!["mIoU [%]".to_string()];
        miou.extend(self.datasets.iter().map(|d| format_percent(d.miou)));
        rows.push(miou);
        let mut excl = vec!["exclusivity [%]".to_string()];
        excl.extend(self.datasets.iter().map(|d| d.exclusivity.map_or("n/a".into(), format_percent)));
        rows.push(excl);

        let mut out = render(&rows);
        out.push('\n');

        let mut class_header = header;
        class_header[0] = "IoU [%]".into();
        let mut class_rows = vec![class_header];
        for (id, name) in self.class_names.iter().enumerate() {
            let id = id as u8;
            if !self.datasets.iter().any(|d| d.per_class.contains_key(&id)) {
                continue;
            }
            let mut row = vec![name.clone()];
            row.extend(self.datasets.iter().map(|d| match d.per_class.get(&id) {
                None => "-".into(),
                Some(None) => "n/a".into(),
                Some(Some(v)) => format_percent(*v),
            }));
            class_rows.push(row);
        }
        out.push_str(&render(&class_rows));
        out
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
                out.push_str(" |");
            } else {
                let _ = write!(out, " {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
        if i == 0 {
            let total = widths[0] + 2 + widths[1..].iter().map(|w| w + 1).sum::<usize>();
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
