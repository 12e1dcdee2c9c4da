//! Experiment tables: the low-resource training-size sweep and the
//! per-class imbalance report.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{subsample, Corpus, CorpusError};
use crate::eval::{EvalReport, PerClassRow};
use crate::trainer::{evaluate_checkpoint, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Training-set fractions mirroring a 1%–100% low-resource ladder.
pub const DEFAULT_FRACTIONS: [f64; 7] = [0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.00];

#[derive(Debug, Clone, Serialize)]
pub struct SweepColumn {
    pub fraction: f64,
    pub train_sentences: usize,
    pub boundary_f1: f64,
    pub category_f1: f64,
    pub report: EvalReport,
}

/// Boundary and category F1 per training fraction, evaluated on the
/// full test split.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepResult {
    pub columns: Vec<SweepColumn>,
}

/// Trains once per fraction on a seeded subsample of `train`, selecting
/// on `dev` and evaluating on the full `test` split. `on_column` runs
/// after every fraction so callers can flush partial results.
pub fn lowresource_sweep(
    train_split: &Corpus,
    dev: &Corpus,
    test: &Corpus,
    fractions: &[f64],
    config: &TrainConfig,
    mut on_column: impl FnMut(&SweepResult),
) -> Result<SweepResult, SweepError> {
    let mut result = SweepResult::default();
    for &fraction in fractions {
        let sub = subsample(train_split, fraction, config.seed)?;
        let (ckpt, _) = train(&sub, dev, config)?;
        let report = evaluate_checkpoint(&ckpt, test, config.threshold, None)?;
        result.columns.push(SweepColumn {
            fraction,
            train_sentences: sub.sentences.len(),
            boundary_f1: report.boundary_f1,
            category_f1: report.f1,
            report,
        });
        on_column(&result);
    }
    Ok(result)
}

fn percent(fraction: f64) -> String {
    let p = fraction * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{:.0}%", p)
    } else {
        format!("{:.1}%", p)
    }
}

impl SweepResult {
    /// Two metric rows (boundary, category), one column per fraction.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}", "entity"));
        for col in &self.columns {
            out.push_str(&format!(" {:>8}", percent(col.fraction)));
        }
        out.push('\n');
        out.push_str(&format!("{:<10}", "boundary"));
        for col in &self.columns {
            out.push_str(&format!(" {:>8.4}", col.boundary_f1));
        }
        out.push('\n');
        out.push_str(&format!("{:<10}", "category"));
        for col in &self.columns {
            out.push_str(&format!(" {:>8.4}", col.category_f1));
        }
        out.push('\n');
        out
    }
}

/// Per-class table sorted by descending gold ratio, followed by the
/// boundary row and the overall row.
#[derive(Debug, Clone, Serialize)]
pub struct ImbalanceReport {
    pub per_class: Vec<PerClassRow>,
    pub boundary_f1: f64,
    pub overall_f1: f64,
    pub report: EvalReport,
}

impl ImbalanceReport {
    pub fn from_eval(report: EvalReport) -> Self {
        let mut per_class = report.per_class.clone();
        per_class.sort_by(|a, b| {
            b.ratio
                .partial_cmp(&a.ratio)
                .expect("ratios are finite")
                .then(a.class.cmp(&b.class))
        });
        Self {
            per_class,
            boundary_f1: report.boundary_f1,
            overall_f1: report.f1,
            report,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>8} {:>8}\n", "category", "ratio", "f1"));
        for row in &self.per_class {
            out.push_str(&format!(
                "{:<12} {:>7.1}% {:>8.4}\n",
                row.label,
                row.ratio * 100.0,
                row.f1
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>8} {:>8.4}\n",
            "boundary", "", self.boundary_f1
        ));
        out.push_str(&format!(
            "{:<12} {:>8} {:>8.4}\n",
            "all", "", self.overall_f1
        ));
        out
    }
}
