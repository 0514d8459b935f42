//! Shared helpers: fixture loading, synthetic data and brute-force oracles.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unilabel::catalog::ClassHistogram;
use unilabel::raster::{color_code_color, AnnotationRaster};
use unilabel::splitter::SplitItem;
use unilabel::taxonomy::{
    merge_label_spaces, parse_directives, parse_taxonomy, ClassMap, DatasetTaxonomy,
    UniversalLabelSpace,
};

pub const IGNORE: u8 = 255;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load_taxonomy(name: &str) -> DatasetTaxonomy {
    let text = std::fs::read_to_string(fixture(&format!("{name}.txt"))).unwrap();
    parse_taxonomy(&text).unwrap()
}

/// Merges the named fixture taxonomies, optionally with the shipped directives.
pub fn merged(names: &[&str], with_directives: bool) -> (Vec<DatasetTaxonomy>, UniversalLabelSpace, ClassMap) {
    let taxonomies: Vec<_> = names.iter().map(|n| load_taxonomy(n)).collect();
    let directives = if with_directives {
        let text = std::fs::read_to_string(fixture("directives.txt")).unwrap();
        parse_directives(&text, &taxonomies).unwrap()
    } else {
        Vec::new()
    };
    let (space, map) = merge_label_spaces(&taxonomies, &directives).unwrap();
    (taxonomies, space, map)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random universal raster with ids in `0..k` and roughly `ignore_share` ignore pixels.
pub fn random_universal(rng: &mut impl Rng, w: u32, h: u32, k: usize, ignore_share: f64) -> AnnotationRaster {
    let ids = (0..w * h)
        .map(|_| {
            if rng.random_bool(ignore_share) {
                IGNORE
            } else {
                rng.random_range(0..k) as u8
            }
        })
        .collect();
    AnnotationRaster::universal(w, h, ids).unwrap()
}

/// Per-pixel confusion tally, `m[g][p]`.
pub fn brute_confusion(pairs: &[(AnnotationRaster, AnnotationRaster)], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (gt, pred) in pairs {
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                let i = (y * gt.width() + x) as usize;
                let g = gt.ids()[i];
                if g == IGNORE {
                    continue;
                }
                m[g as usize][pred.ids()[i] as usize] += 1;
            }
        }
    }
    m
}

/// IoU from row and column sums: `diag / (row + col - diag)`.
pub fn brute_iou(m: &[Vec<u64>]) -> Vec<Option<f64>> {
    let k = m.len();
    (0..k)
        .map(|c| {
            let row: u64 = m[c].iter().sum();
            let col: u64 = m.iter().map(|r| r[c]).sum();
            let union = row + col - m[c][c];
            if union == 0 {
                None
            } else {
                Some(m[c][c] as f64 / union as f64)
            }
        })
        .collect()
}

pub fn brute_miou(ious: &[Option<f64>], subset: Option<&[u8]>) -> Option<f64> {
    let vals: Vec<f64> = match subset {
        Some(s) => s.iter().filter_map(|&c| ious.get(c as usize).copied().flatten()).collect(),
        None => ious.iter().flatten().copied().collect(),
    };
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// L1 divergence computed straight from count vectors.
pub fn oracle_divergence(val: &[u64], train: &[u64]) -> f64 {
    let vt: u64 = val.iter().sum();
    let tt: u64 = train.iter().sum();
    val.iter()
        .zip(train)
        .map(|(&v, &t)| (v as f64 / vt as f64 - t as f64 / tt as f64).abs())
        .sum()
}

/// Records whose class mass is concentrated on one or two of `classes` classes.
pub fn skewed_counts(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Vec<u64>> {
    (0..n)
        .map(|_| {
            let mut counts = vec![0u64; classes];
            let major = rng.random_range(0..classes);
            counts[major] = rng.random_range(200..2000);
            if rng.random_bool(0.5) {
                let minor = rng.random_range(0..classes);
                counts[minor] += rng.random_range(10..300);
            }
            // rare classes show up in a few records only
            if rng.random_bool(0.1) {
                counts[classes - 1] += rng.random_range(5..50);
            }
            counts
        })
        .collect()
}

pub fn split_items(counts: &[Vec<u64>]) -> Vec<SplitItem> {
    counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let h = ClassHistogram::from_counts(c.iter().enumerate().map(|(id, &n)| (id as u8, n)));
            SplitItem::new(format!("ds:rec{i:04}"), h)
        })
        .collect()
}

/// Sums the count vectors of the records in `members`.
pub fn side_counts(counts: &[Vec<u64>], members: impl Iterator<Item = usize>) -> Vec<u64> {
    let mut acc = vec![0u64; counts[0].len()];
    for i in members {
        for (a, c) in acc.iter_mut().zip(&counts[i]) {
            *a += c;
        }
    }
    acc
}

/// Best divergence over every validation subset of size `m`.
pub fn exhaustive_optimum(counts: &[Vec<u64>], m: usize) -> f64 {
    let n = counts.len();
    assert!(n <= 20);
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let val = side_counts(counts, (0..n).filter(|i| mask >> i & 1 == 1));
        let train = side_counts(counts, (0..n).filter(|i| mask >> i & 1 == 0));
        if val.iter().sum::<u64>() == 0 || train.iter().sum::<u64>() == 0 {
            continue;
        }
        best = best.min(oracle_divergence(&val, &train));
    }
    best
}

/// Plan divergence recomputed by the oracle from record indices.
pub fn plan_oracle_divergence(counts: &[Vec<u64>], val_keys: &std::collections::BTreeSet<String>) -> f64 {
    let n = counts.len();
    let is_val = |i: usize| val_keys.contains(&format!("ds:rec{i:04}"));
    let val = side_counts(counts, (0..n).filter(|&i| is_val(i)));
    let train = side_counts(counts, (0..n).filter(|&i| !is_val(i)));
    oracle_divergence(&val, &train)
}

/// Nearest-rank percentile of `values`.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Cityscapes label ids used by the fixture (evaluation classes plus a few ignored ones).
pub const CITYSCAPES_IDS: [u8; 22] =
    [0, 1, 4, 7, 8, 11, 12, 13, 17, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 31, 32, 33];

/// Writes a small synthetic two-dataset corpus laid out for the default
/// pairing rule: `<root>/<dataset>/{images,annotations}/...`.
pub fn write_corpus(root: &Path, images: usize, seed: u64) {
    let mut rng = rng(seed);
    for (dataset, count) in [("cityscapes", images - images / 4), ("suim", images / 4)] {
        let img_dir = root.join(dataset).join("images");
        let ann_dir = root.join(dataset).join("annotations");
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&ann_dir).unwrap();
        for i in 0..count {
            let (w, h) = (rng.random_range(8..33), rng.random_range(8..25));
            image::RgbImage::new(w, h).save(img_dir.join(format!("{i:04}.png"))).unwrap();
            if dataset == "suim" {
                let mut ann = image::RgbImage::new(w, h);
                for p in ann.pixels_mut() {
                    *p = image::Rgb(color_code_color(rng.random_range(0..8)));
                }
                ann.save(ann_dir.join(format!("{i:04}.bmp"))).unwrap();
            } else {
                let mut ann = image::GrayImage::new(w, h);
                let major = CITYSCAPES_IDS[rng.random_range(0..CITYSCAPES_IDS.len())];
                for p in ann.pixels_mut() {
                    let id = if rng.random_bool(0.6) {
                        major
                    } else {
                        CITYSCAPES_IDS[rng.random_range(0..CITYSCAPES_IDS.len())]
                    };
                    *p = image::Luma([id]);
                }
                ann.save(ann_dir.join(format!("{i:04}.png"))).unwrap();
            }
        }
    }
}

/// Proptest settings without on-disk failure persistence.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases, failure_persistence: None, ..Default::default() }
}
