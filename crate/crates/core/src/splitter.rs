//! Validation split selection.
//!
//! The objective is the L1 distance between the per-pixel class proportions
//! of the validation and training sides. [`propose_split`] builds a
//! validation set greedily and then improves it with val/train swaps.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ClassHistogram;
use crate::error::{Error, Result};
use crate::taxonomy::IGNORE_ID;

/// Fraction of records placed in validation when none is given.
pub const DEFAULT_FRACTION: f64 = 0.2;

/// A record key with its class histogram.
#[derive(Clone, Debug)]
pub struct SplitItem {
    pub key: String,
    pub histogram: ClassHistogram,
}

impl SplitItem {
    pub fn new(key: impl Into<String>, histogram: ClassHistogram) -> Self {
        SplitItem { key: key.into(), histogram }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub val_records: BTreeSet<String>,
    pub train_records: BTreeSet<String>,
    pub divergence: f64,
    pub seed: u64,
    pub target_fraction: f64,
    /// Hill-climbing passes requested; 0 for plans without local search.
    pub sweeps: u32,
}

/// Persisted next to a manifest whose split column was rewritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub seed: u64,
    pub fraction: f64,
    pub sweeps: u32,
    pub divergence: f64,
}

impl SplitPlan {
    pub fn sidecar(&self) -> SplitSidecar {
        SplitSidecar {
            seed: self.seed,
            fraction: self.target_fraction,
            sweeps: self.sweeps,
            divergence: self.divergence,
        }
    }

    /// Recomputes the divergence from `items`, which must cover the plan.
    pub fn recompute_divergence(&self, items: &[SplitItem]) -> Result<f64> {
        let mut val = ClassHistogram::default();
        let mut train = ClassHistogram::default();
        for item in items {
            if self.val_records.contains(&item.key) {
                val.merge(&item.histogram);
            } else if self.train_records.contains(&item.key) {
                train.merge(&item.histogram);
            }
        }
        split_divergence(&val, &train)
    }
}

/// L1 distance between normalized class distributions, in `[0, 2]`.
pub fn split_divergence(h_val: &ClassHistogram, h_train: &ClassHistogram) -> Result<f64> {
    let val_total = h_val.total_eval_pixels();
    let train_total = h_train.total_eval_pixels();
    if val_total == 0 {
        return Err(Error::EmptyHistogram("validation side".into()));
    }
    if train_total == 0 {
        return Err(Error::EmptyHistogram("training side".into()));
    }
    let (vt, tt) = (val_total as f64, train_total as f64);
    let mut sum = 0.0;
    for id in 0..IGNORE_ID {
        let (v, t) = (h_val.count(id), h_train.count(id));
        if v == 0 && t == 0 {
            continue;
        }
        sum += (v as f64 / vt - t as f64 / tt).abs();
    }
    Ok(sum)
}

/// `round(fraction * n)` clamped to `[1, n - 1]`.
pub fn target_val_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

fn check_request(items: &[SplitItem], fraction: f64) -> Result<()> {
    if items.len() < 2 {
        return Err(Error::SplitRequest(format!("need at least 2 records, got {}", items.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::SplitRequest(format!("fraction {fraction} outside (0, 1)")));
    }
    let keys: BTreeSet<&str> = items.iter().map(|i| i.key.as_str()).collect();
    if keys.len() != items.len() {
        return Err(Error::SplitRequest("duplicate record keys".into()));
    }
    Ok(())
}

/// Dense per-record counts over the classes present anywhere.
struct Instance {
    order: Vec<usize>,
    classes: usize,
    counts: Vec<u64>,
    totals: Vec<u64>,
    item_totals: Vec<u64>,
    grand_total: u64,
}

impl Instance {
    /// Items are visited in key order; `order[i]` is the input index of the
    /// i-th smallest key.
    fn new(items: &[SplitItem]) -> Self {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| items[a].key.cmp(&items[b].key));

        let mut present = [false; 256];
        for item in items {
            for (id, _) in item.histogram.nonzero() {
                present[usize::from(id)] = true;
            }
        }
        let class_ids: Vec<u8> = (0..=u8::MAX).filter(|&id| present[usize::from(id)]).collect();
        let classes = class_ids.len();

        let mut counts = Vec::with_capacity(items.len() * classes);
        let mut item_totals = Vec::with_capacity(items.len());
        for &i in &order {
            let h = &items[i].histogram;
            counts.extend(class_ids.iter().map(|&id| h.count(id)));
            item_totals.push(h.total_eval_pixels());
        }
        let mut totals = vec![0u64; classes];
        for row in counts.chunks_exact(classes.max(1)) {
            for (t, c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
        let grand_total = item_totals.iter().sum();
        Instance { order, classes, counts, totals, item_totals, grand_total }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.classes..(i + 1) * self.classes]
    }

    /// Divergence of a validation side given its counts, with `add` and
    /// `remove` applied on the fly. Infinite when a side has no pixels.
    fn score(&self, val: &[u64], val_total: u64, add: Option<usize>, remove: Option<usize>) -> f64 {
        let mut vt = val_total;
        if let Some(a) = add {
            vt += self.item_totals[a];
        }
        if let Some(r) = remove {
            vt -= self.item_totals[r];
        }
        let tt = self.grand_total - vt;
        if vt == 0 || tt == 0 {
            return f64::INFINITY;
        }
        let (vinv, tinv) = (1.0 / vt as f64, 1.0 / tt as f64);
        let add_row = add.map(|a| self.row(a));
        let remove_row = remove.map(|r| self.row(r));
        let mut sum = 0.0;
        for c in 0..self.classes {
            let mut v = val[c];
            if let Some(row) = add_row {
                v += row[c];
            }
            if let Some(row) = remove_row {
                v -= row[c];
            }
            let t = self.totals[c] - v;
            sum += (v as f64 * vinv - t as f64 * tinv).abs();
        }
        sum
    }
}

#[derive(Clone)]
struct ValState {
    members: Vec<bool>,
    counts: Vec<u64>,
    total: u64,
}

impl ValState {
    fn new(instance: &Instance) -> Self {
        ValState {
            members: vec![false; instance.item_totals.len()],
            counts: vec![0; instance.classes],
            total: 0,
        }
    }

    fn add(&mut self, instance: &Instance, i: usize) {
        self.members[i] = true;
        for (v, c) in self.counts.iter_mut().zip(instance.row(i)) {
            *v += c;
        }
        self.total += instance.item_totals[i];
    }

    fn remove(&mut self, instance: &Instance, i: usize) {
        self.members[i] = false;
        for (v, c) in self.counts.iter_mut().zip(instance.row(i)) {
            *v -= c;
        }
        self.total -= instance.item_totals[i];
    }
}

/// Lowest score, ties to the lowest index. Independent of worker count.
fn best_of(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => {
            if a.1 <= b.1 {
                a
            } else {
                b
            }
        }
    }
}

/// Greedy starts tried by [`propose_split`].
pub const RESTARTS: usize = 8;

/// Perturbation rounds applied to the best climbed plan.
pub const KICKS: usize = 32;

/// Candidate evaluations, in class-count units, after which no further
/// restart or perturbation round is begun. Counting work instead of time
/// keeps plans reproducible.
pub const WORK_BUDGET: u64 = 1_000_000_000;

/// Greedy construction followed by val/train swap hill-climbing.
///
/// The greedy pass is repeated from up to [`RESTARTS`] seed-chosen first
/// records and each result is climbed with up to `sweeps` passes. The best
/// plan then goes through up to [`KICKS`] rounds of a random exchange of one
/// to three pairs plus another climb, kept only when strictly better. Rounds
/// beyond the first start stop once [`WORK_BUDGET`] is spent. Inside a pass
/// every choice is the candidate with the lowest divergence, ties going to
/// the lowest record key, so the plan depends on the seed alone.
/// `sweeps = 0` returns the best greedy plan.
pub fn propose_split(items: &[SplitItem], fraction: f64, seed: u64, sweeps: u32) -> Result<SplitPlan> {
    check_request(items, fraction)?;
    let instance = Instance::new(items);
    let n = items.len();
    let target = target_val_size(n, fraction);
    let mut work = 0u64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = rand::seq::index::sample(&mut rng, n, RESTARTS.min(n));
    let mut best: Option<(f64, ValState)> = None;
    for start in starts {
        if best.is_some() && work >= WORK_BUDGET {
            break;
        }
        let mut state = greedy_from(&instance, target, start, &mut work);
        let score = climb(&instance, &mut state, sweeps, &mut work);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, state));
        }
    }
    let (mut best_score, mut best_state) = best.expect("at least one start");

    if sweeps > 0 && target < n {
        for kick in 0..KICKS {
            if work >= WORK_BUDGET {
                break;
            }
            let mut state = best_state.clone();
            let val: Vec<usize> = (0..n).filter(|&i| state.members[i]).collect();
            let train: Vec<usize> = (0..n).filter(|&i| !state.members[i]).collect();
            let pairs = (1 + kick % 3).min(val.len()).min(train.len());
            let outs = rand::seq::index::sample(&mut rng, val.len(), pairs);
            let ins = rand::seq::index::sample(&mut rng, train.len(), pairs);
            for (o, i) in outs.into_iter().zip(ins) {
                state.remove(&instance, val[o]);
                state.add(&instance, train[i]);
            }
            let score = climb(&instance, &mut state, sweeps, &mut work);
            if score < best_score {
                best_score = score;
                best_state = state;
            }
        }
    }
    finish_plan(items, &instance, &best_state.members, seed, fraction, sweeps)
}

fn greedy_from(instance: &Instance, target: usize, start: usize, work: &mut u64) -> ValState {
    let n = instance.item_totals.len();
    let mut state = ValState::new(instance);
    state.add(instance, start);
    for size in 1..target {
        let (_, pick) = (0..n)
            .into_par_iter()
            .filter(|&i| !state.members[i])
            .map(|i| (instance.score(&state.counts, state.total, Some(i), None), i))
            .reduce_with(best_of)
            .expect("training side is never empty before the target is reached");
        state.add(instance, pick);
        *work += ((n - size) * instance.classes.max(1)) as u64;
    }
    state
}

/// Swap passes until one makes no change or `sweeps` are done. Each
/// validation member is swapped for its best training replacement when that
/// strictly lowers the divergence. Returns the final divergence.
fn climb(instance: &Instance, state: &mut ValState, sweeps: u32, work: &mut u64) -> f64 {
    let n = instance.item_totals.len();
    let in_val = state.members.iter().filter(|&&m| m).count();
    let pass_cost = (in_val * (n - in_val) * instance.classes.max(1)) as u64;
    let mut current = instance.score(&state.counts, state.total, None, None);
    for _ in 0..sweeps {
        let mut improved = false;
        for out in 0..n {
            if !state.members[out] {
                continue;
            }
            let best = (0..n)
                .into_par_iter()
                .filter(|&i| !state.members[i])
                .map(|i| (instance.score(&state.counts, state.total, Some(i), Some(out)), i))
                .reduce_with(best_of);
            if let Some((score, into)) = best {
                if score < current {
                    state.remove(instance, out);
                    state.add(instance, into);
                    current = score;
                    improved = true;
                }
            }
        }
        *work += pass_cost;
        if !improved {
            break;
        }
    }
    current
}

/// Uniformly random validation subset of the target size.
pub fn random_split(items: &[SplitItem], fraction: f64, seed: u64) -> Result<SplitPlan> {
    check_request(items, fraction)?;
    let instance = Instance::new(items);
    let n = items.len();
    let target = target_val_size(n, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, target) {
        members[i] = true;
    }
    finish_plan(items, &instance, &members, seed, fraction, 0)
}

fn finish_plan(
    items: &[SplitItem],
    instance: &Instance,
    members: &[bool],
    seed: u64,
    fraction: f64,
    sweeps: u32,
) -> Result<SplitPlan> {
    let mut val = ClassHistogram::default();
    let mut train = ClassHistogram::default();
    let mut val_records = BTreeSet::new();
    let mut train_records = BTreeSet::new();
    for (sorted, &input) in instance.order.iter().enumerate() {
        let item = &items[input];
        if members[sorted] {
            val.merge(&item.histogram);
            val_records.insert(item.key.clone());
        } else {
            train.merge(&item.histogram);
            train_records.insert(item.key.clone());
        }
    }
    let divergence = split_divergence(&val, &train)?;
    Ok(SplitPlan { val_records, train_records, divergence, seed, target_fraction: fraction, sweeps })
}
