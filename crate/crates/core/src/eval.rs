//! Span decoding and corpus-level evaluation.
//!
//! Decoding thresholds the score tensor cell-wise; nested and
//! overlapping outputs are allowed. Metrics are micro-averaged: counts
//! are summed over sentences before any division. Boundary metrics
//! project both sides to deduplicated (start, end) pairs per sentence,
//! isolating localization from classification.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Sentence};
use crate::losses::GoldTensor;
use crate::scorer::ScoreTensor;

/// Set of (start, end, class-id) triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PredictionSet {
    triples: BTreeSet<(usize, usize, usize)>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, start: usize, end: usize, class: usize) {
        debug_assert!(start <= end);
        self.triples.insert((start, end, class));
    }

    pub fn contains(&self, start: usize, end: usize, class: usize) -> bool {
        self.triples.contains(&(start, end, class))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.triples.iter().copied()
    }

    pub fn from_sentence(sentence: &Sentence, labels: &LabelSet) -> Self {
        let mut set = Self::new();
        for ann in &sentence.entities {
            if let Some(class) = labels.index(&ann.label) {
                set.insert(ann.start, ann.end, class);
            }
        }
        set
    }

    pub fn from_gold(gold: &GoldTensor) -> Self {
        let mut set = Self::new();
        for class in 0..gold.classes() {
            for (i, j) in gold.gold_cells(class) {
                set.insert(i, j, class);
            }
        }
        set
    }
}

impl FromIterator<(usize, usize, usize)> for PredictionSet {
    fn from_iter<T: IntoIterator<Item = (usize, usize, usize)>>(iter: T) -> Self {
        Self {
            triples: iter.into_iter().collect(),
        }
    }
}

/// Emits every valid cell scoring strictly above `threshold`,
/// optionally capped to spans of at most `max_len` tokens.
pub fn decode(scores: &ScoreTensor, threshold: f64, max_len: Option<usize>) -> PredictionSet {
    let mut out = PredictionSet::new();
    for class in 0..scores.classes() {
        for (i, j) in scores.valid_cells() {
            if let Some(cap) = max_len {
                if j - i + 1 > cap {
                    continue;
                }
            }
            if scores.get(class, i, j) > threshold {
                out.insert(i, j, class);
            }
        }
    }
    out
}

/// Drops the class and merges duplicates.
pub fn boundary_project(spans: &PredictionSet) -> BTreeSet<(usize, usize)> {
    spans.iter().map(|(s, e, _)| (s, e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: usize,
    pub label: String,
    pub count_gold: usize,
    /// Share of all gold entities carrying this label.
    pub ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub boundary_f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// One row per label, in label-set order.
    pub per_class: Vec<PerClassRow>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}

/// Micro evaluation over per-sentence (prediction, gold) pairs.
pub fn evaluate_sets(pairs: &[(PredictionSet, PredictionSet)], labels: &LabelSet) -> EvalReport {
    let classes = labels.len();
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let (mut btp, mut bfp, mut bfn) = (0, 0, 0);
    let mut class_tp = vec![0usize; classes];
    let mut class_fp = vec![0usize; classes];
    let mut class_fn = vec![0usize; classes];
    let mut class_gold = vec![0usize; classes];
    for (preds, golds) in pairs {
        for t @ (_, _, class) in preds.iter() {
            if golds.triples.contains(&t) {
                tp += 1;
                class_tp[class] += 1;
            } else {
                fp += 1;
                class_fp[class] += 1;
            }
        }
        for t @ (_, _, class) in golds.iter() {
            class_gold[class] += 1;
            if !preds.triples.contains(&t) {
                fn_ += 1;
                class_fn[class] += 1;
            }
        }
        let pb = boundary_project(preds);
        let gb = boundary_project(golds);
        btp += pb.intersection(&gb).count();
        bfp += pb.difference(&gb).count();
        bfn += gb.difference(&pb).count();
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    let (boundary_precision, boundary_recall, boundary_f1) = prf(btp, bfp, bfn);
    let total_gold: usize = class_gold.iter().sum();
    let per_class = (0..classes)
        .map(|c| {
            let (p, r, f) = prf(class_tp[c], class_fp[c], class_fn[c]);
            PerClassRow {
                class: c,
                label: labels.name(c).to_string(),
                count_gold: class_gold[c],
                ratio: if total_gold == 0 {
                    0.0
                } else {
                    class_gold[c] as f64 / total_gold as f64
                },
                precision: p,
                recall: r,
                f1: f,
            }
        })
        .collect();
    EvalReport {
        precision,
        recall,
        f1,
        boundary_precision,
        boundary_recall,
        boundary_f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        per_class,
    }
}

/// Single-pair convenience wrapper around [`evaluate_sets`].
pub fn evaluate(preds: &PredictionSet, golds: &PredictionSet, labels: &LabelSet) -> EvalReport {
    evaluate_sets(
        std::slice::from_ref(&(preds.clone(), golds.clone())),
        labels,
    )
}

/// Per-class rows sorted by descending gold count (class id breaks ties).
pub fn per_class_report(
    preds: &PredictionSet,
    golds: &PredictionSet,
    labels: &LabelSet,
) -> Vec<PerClassRow> {
    let mut rows = evaluate(preds, golds, labels).per_class;
    rows.sort_by(|a, b| b.count_gold.cmp(&a.count_gold).then(a.class.cmp(&b.class)));
    rows
}

impl EvalReport {
    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10}\n",
            "metric", "precision", "recall", "f1"
        ));
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            "triple", self.precision, self.recall, self.f1
        ));
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            "boundary", self.boundary_precision, self.boundary_recall, self.boundary_f1
        ));
        out.push_str(&format!(
            "counts: tp={} fp={} fn={}\n",
            self.true_positives, self.false_positives, self.false_negatives
        ));
        out.push_str(&format!(
            "\n{:<12} {:>8} {:>8} {:>10} {:>10} {:>10}\n",
            "label", "gold", "ratio", "precision", "recall", "f1"
        ));
        for row in &self.per_class {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8.4} {:>10.4} {:>10.4} {:>10.4}\n",
                row.label, row.count_gold, row.ratio, row.precision, row.recall, row.f1
            ));
        }
        out
    }
}
