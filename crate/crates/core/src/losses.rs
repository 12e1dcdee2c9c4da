//! Differentiable training objectives over a span-score tensor.
//!
//! The box loss treats each class slice of the probability matrix as a
//! soft rectangle in the (start-index, end-index) plane: a weighted
//! center, weighted absolute spreads as extents, and a soft IoU against
//! the gold cells. On top of the negative-log-IoU penalty it adds a
//! center-distance term normalized by the enclosing box diagonal and an
//! arctangent aspect penalty. The imbalance loss couples, per class,
//! all positive-cell and negative-cell scores through one
//! log(1 + sum_neg e^s * sum_pos e^-s) term, computed with
//! log-sum-exp/softplus so scores of any magnitude stay finite.
//!
//! Gradients of the box loss are exact reverse-mode derivatives
//! recorded on a [`Tape`]; the imbalance gradients are closed-form.
//! [`finite_diff_check`] verifies either against central differences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSet, Sentence};
use crate::scorer::ScoreTensor;
use crate::tape::{Scalar, Tape};

/// Guard below which a weight matrix is considered massless.
pub const EPS_MASS: f64 = 1e-12;
/// Degenerate-aspect guard: the aspect term is defined as zero when
/// both `v` and `1 - iou` fall below this.
pub const EPS_ASPECT: f64 = 1e-9;
/// Floor in relative-error denominators.
pub const EPS_REL_ERR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("score tensor is {scores:?} but gold tensor is {gold:?} (classes, size, valid_len)")]
    ShapeMismatch {
        scores: (usize, usize, usize),
        gold: (usize, usize, usize),
    },
    #[error("gold slice has no positive cell")]
    EmptyGoldSlice,
    #[error("total weight {0} is below the mass guard")]
    MassTooSmall(f64),
    #[error("beta must be in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("annotation ({start}, {end}) out of range for {len} tokens")]
    AnnotationOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("annotation label {0:?} is not in the label set")]
    UnknownLabel(String),
}

/// Binary gold cells over the same layout and validity mask as the
/// score tensor it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTensor {
    classes: usize,
    size: usize,
    valid_len: usize,
    cells: Vec<bool>,
}

impl GoldTensor {
    pub fn zeros(classes: usize, size: usize, valid_len: usize) -> Self {
        assert!(valid_len <= size);
        Self {
            classes,
            size,
            valid_len,
            cells: vec![false; classes * size * size],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.classes, self.size, self.valid_len)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    #[inline]
    fn index(&self, class: usize, i: usize, j: usize) -> usize {
        (class * self.size + i) * self.size + j
    }

    pub fn set(&mut self, class: usize, i: usize, j: usize) {
        let idx = self.index(class, i, j);
        self.cells[idx] = true;
    }

    pub fn is_gold(&self, class: usize, i: usize, j: usize) -> bool {
        self.cells[self.index(class, i, j)]
    }

    /// Gold cells of one class slice, in row-major order.
    pub fn gold_cells(&self, class: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.valid_len {
            for j in i..self.valid_len {
                if self.is_gold(class, i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn total_gold(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// Builds the gold tensor for one sentence: exactly one live cell per
/// annotation triple.
pub fn gold_tensor(
    sentence: &Sentence,
    labels: &LabelSet,
    size: usize,
) -> Result<GoldTensor, LossError> {
    let k = sentence.tokens.len();
    assert!(k <= size, "sentence longer than tensor size");
    let mut gold = GoldTensor::zeros(labels.len(), size, k);
    for ann in &sentence.entities {
        let class = labels
            .index(&ann.label)
            .ok_or_else(|| LossError::UnknownLabel(ann.label.clone()))?;
        if ann.start > ann.end || ann.end >= k {
            return Err(LossError::AnnotationOutOfRange {
                start: ann.start,
                end: ann.end,
                len: k,
            });
        }
        gold.set(class, ann.start, ann.end);
    }
    Ok(gold)
}

/// Differentiable bounding-box summary of a nonnegative weight matrix:
/// weighted center, twice the weighted mean absolute deviation plus one
/// as the extent per axis (a point mass has extents exactly 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SoftBox {
    /// (start-axis, end-axis) center of mass.
    pub center: (f64, f64),
    pub extent_b: f64,
    pub extent_c: f64,
    pub mass: f64,
}

struct SoftBoxG<S> {
    row: S,
    col: S,
    extent_b: S,
    extent_c: S,
    mass: S,
}

fn soft_box_g<S: Scalar>(cells: &[(usize, usize, S)]) -> Result<SoftBoxG<S>, LossError> {
    let probe = cells
        .first()
        .map(|&(_, _, w)| w)
        .ok_or(LossError::MassTooSmall(0.0))?;
    let zero = probe.lift(0.0);
    let (mut mass, mut wr, mut wc) = (zero, zero, zero);
    for &(i, j, w) in cells {
        mass = mass + w;
        wr = wr + w * w.lift(i as f64);
        wc = wc + w * w.lift(j as f64);
    }
    if mass.value() <= EPS_MASS {
        return Err(LossError::MassTooSmall(mass.value()));
    }
    let row = wr / mass;
    let col = wc / mass;
    let (mut dev_r, mut dev_c) = (zero, zero);
    for &(i, j, w) in cells {
        dev_r = dev_r + w * (w.lift(i as f64) - row).abs();
        dev_c = dev_c + w * (w.lift(j as f64) - col).abs();
    }
    let one = probe.lift(1.0);
    let two = probe.lift(2.0);
    Ok(SoftBoxG {
        row,
        col,
        extent_b: two * (dev_r / mass) + one,
        extent_c: two * (dev_c / mass) + one,
        mass,
    })
}

/// Soft box of explicit `(row, col, weight)` cells.
pub fn soft_box(cells: &[(usize, usize, f64)]) -> Result<SoftBox, LossError> {
    let b = soft_box_g(cells)?;
    Ok(SoftBox {
        center: (b.row, b.col),
        extent_b: b.extent_b,
        extent_c: b.extent_c,
        mass: b.mass,
    })
}

fn soft_iou_g<S: Scalar>(probs: &[S], gold: &[f64]) -> S {
    debug_assert_eq!(probs.len(), gold.len());
    let zero = probs[0].lift(0.0);
    let mut intersection = zero;
    let mut sum_p = zero;
    let mut sum_y = 0.0;
    for (&p, &y) in probs.iter().zip(gold) {
        sum_p = sum_p + p;
        if y != 0.0 {
            intersection = intersection + p * p.lift(y);
            sum_y += y;
        }
    }
    let union = sum_p + intersection.lift(sum_y) - intersection;
    intersection / union
}

/// Soft Jaccard overlap of probabilities against a gold slice, both
/// given as aligned valid-cell vectors. The gold slice must contain at
/// least one positive cell.
pub fn soft_iou(probs: &[f64], gold: &[f64]) -> Result<f64, LossError> {
    if probs.len() != gold.len() {
        return Err(LossError::ShapeMismatch {
            scores: (1, probs.len(), probs.len()),
            gold: (1, gold.len(), gold.len()),
        });
    }
    if gold.iter().all(|&y| y == 0.0) || gold.is_empty() {
        return Err(LossError::EmptyGoldSlice);
    }
    Ok(soft_iou_g(probs, gold))
}

const ASPECT_SCALE: f64 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);

/// Aspect mismatch `4/pi^2 * (atan(b_gt/c_gt) - atan(b/c))^2`; lands in
/// `[0, 1)` for finite positive extents.
pub fn aspect_penalty(gold_b: f64, gold_c: f64, pred_b: f64, pred_c: f64) -> f64 {
    let diff = (gold_b / gold_c).atan() - (pred_b / pred_c).atan();
    ASPECT_SCALE * diff * diff
}

/// Squared center distance normalized by the squared diagonal of the
/// smallest box enclosing both; bounded to `[0, 1]`.
pub fn center_term(a: &SoftBox, b: &SoftBox) -> f64 {
    let rho2 = (a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2);
    let lo_r = (a.center.0 - a.extent_b / 2.0).min(b.center.0 - b.extent_b / 2.0);
    let hi_r = (a.center.0 + a.extent_b / 2.0).max(b.center.0 + b.extent_b / 2.0);
    let lo_c = (a.center.1 - a.extent_c / 2.0).min(b.center.1 - b.extent_c / 2.0);
    let hi_c = (a.center.1 + a.extent_c / 2.0).max(b.center.1 + b.extent_c / 2.0);
    let enc_b = hi_r - lo_r;
    let enc_c = hi_c - lo_c;
    rho2 / (enc_b * enc_b + enc_c * enc_c)
}

/// Per-class components of the box loss.
#[derive(Debug, Clone, Serialize)]
pub struct EiouClassTerms {
    pub class: usize,
    pub iou: f64,
    pub neg_log_iou: f64,
    pub center_term: f64,
    pub v: f64,
    pub aspect_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EiouBreakdown {
    /// One entry per gold-bearing class.
    pub per_class: Vec<EiouClassTerms>,
    pub aggregate: f64,
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    /// Same layout as the score tensor; zero on masked cells.
    pub grad: Vec<f64>,
    pub eiou: Option<EiouBreakdown>,
    pub emc: Option<EmcTerms>,
}

fn check_shapes(scores: &ScoreTensor, gold: &GoldTensor) -> Result<(), LossError> {
    let s = (scores.classes(), scores.size(), scores.valid_len());
    if s != gold.shape() {
        return Err(LossError::ShapeMismatch {
            scores: s,
            gold: gold.shape(),
        });
    }
    Ok(())
}

/// Box loss over all gold-bearing classes: mean of
/// `-ln(iou) + center_term + v^2 / ((1 - iou) + v)` per class, zero when
/// no class has gold. Gradients are exact reverse-mode derivatives with
/// respect to every valid score cell.
pub fn eiou_loss(scores: &ScoreTensor, gold: &GoldTensor) -> Result<LossResult, LossError> {
    check_shapes(scores, gold)?;
    let mut grad = vec![0.0; scores.data().len()];
    let mut per_class = Vec::new();

    let tape = Tape::new();
    let mut class_totals = Vec::new();
    let mut leaves: Vec<(usize, crate::tape::Var<'_>)> = Vec::new();
    for class in 0..scores.classes() {
        let gold_cells = gold.gold_cells(class);
        if gold_cells.is_empty() {
            continue;
        }
        let cells: Vec<(usize, usize)> = scores.valid_cells().collect();
        let mut probs = Vec::with_capacity(cells.len());
        let mut gold01 = Vec::with_capacity(cells.len());
        let mut weighted = Vec::with_capacity(cells.len());
        for &(i, j) in &cells {
            let leaf = tape.leaf(scores.get(class, i, j));
            leaves.push((scores.index(class, i, j), leaf));
            let p = leaf.sigmoid();
            probs.push(p);
            gold01.push(f64::from(gold.is_gold(class, i, j)));
            weighted.push((i, j, p));
        }
        let iou = soft_iou_g(&probs, &gold01);
        let pred_box = soft_box_g(&weighted)?;
        let gold_box = soft_box(
            &gold_cells
                .iter()
                .map(|&(i, j)| (i, j, 1.0))
                .collect::<Vec<_>>(),
        )?;

        let probe = probs[0];
        let lift = |c: f64| probe.lift(c);

        let rho2 = {
            let dr = pred_box.row - lift(gold_box.center.0);
            let dc = pred_box.col - lift(gold_box.center.1);
            dr * dr + dc * dc
        };
        let half = lift(0.5);
        let p_lo_r = pred_box.row - pred_box.extent_b * half;
        let p_hi_r = pred_box.row + pred_box.extent_b * half;
        let p_lo_c = pred_box.col - pred_box.extent_c * half;
        let p_hi_c = pred_box.col + pred_box.extent_c * half;
        let enc_b = Scalar::max(p_hi_r, lift(gold_box.center.0 + gold_box.extent_b / 2.0))
            - Scalar::min(p_lo_r, lift(gold_box.center.0 - gold_box.extent_b / 2.0));
        let enc_c = Scalar::max(p_hi_c, lift(gold_box.center.1 + gold_box.extent_c / 2.0))
            - Scalar::min(p_lo_c, lift(gold_box.center.1 - gold_box.extent_c / 2.0));
        let center = rho2 / (enc_b * enc_b + enc_c * enc_c);

        let gold_atan = (gold_box.extent_b / gold_box.extent_c).atan();
        let diff = lift(gold_atan) - (pred_box.extent_b / pred_box.extent_c).atan();
        let v = diff * diff * lift(ASPECT_SCALE);

        let one_minus_iou = lift(1.0) - iou;
        let aspect = if v.value() < EPS_ASPECT && one_minus_iou.value() < EPS_ASPECT {
            lift(0.0)
        } else {
            v * v / (one_minus_iou + v)
        };

        let total = -(iou.ln()) + center + aspect;
        per_class.push(EiouClassTerms {
            class,
            iou: iou.value(),
            neg_log_iou: -iou.value().ln(),
            center_term: center.value(),
            v: v.value(),
            aspect_term: aspect.value(),
            total: total.value(),
        });
        class_totals.push(total);
    }

    if class_totals.is_empty() {
        return Ok(LossResult {
            value: 0.0,
            grad,
            eiou: Some(EiouBreakdown {
                per_class,
                aggregate: 0.0,
            }),
            emc: None,
        });
    }
    let mut sum = class_totals[0];
    for t in &class_totals[1..] {
        sum = sum + *t;
    }
    let aggregate = sum * sum.lift(1.0 / class_totals.len() as f64);
    let adjoints = tape.gradients(aggregate);
    for (flat, leaf) in leaves {
        grad[flat] = adjoints.wrt(leaf);
    }
    Ok(LossResult {
        value: aggregate.value(),
        grad,
        eiou: Some(EiouBreakdown {
            per_class,
            aggregate: aggregate.value(),
        }),
        emc: None,
    })
}

/// Which coupling the imbalance loss uses per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmcForm {
    /// `log(1 + sum_neg e^s * sum_pos e^-s)`; an empty positive or
    /// negative set annihilates the class term.
    #[default]
    Product,
    /// Independent `log(1 + sum_neg e^s) + log(1 + sum_pos e^-s)`;
    /// keeps pressure on negatives when a class is absent.
    Additive,
}

impl std::str::FromStr for EmcForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product" => Ok(Self::Product),
            "additive" => Ok(Self::Additive),
            other => Err(format!(
                "unknown emc form {other:?} (expected product|additive)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EmcConfig {
    pub form: EmcForm,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmcClassTerms {
    pub class: usize,
    pub positives: usize,
    pub negatives: usize,
    /// log-sum-exp of negative-cell scores, when any.
    pub lse_negatives: Option<f64>,
    /// log-sum-exp of negated positive-cell scores, when any.
    pub lse_negated_positives: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmcTerms {
    pub per_class: Vec<EmcClassTerms>,
    pub total: f64,
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Multi-class imbalance loss summed over classes, with closed-form
/// gradients. Positive cells are the gold cells of the class slice;
/// negative cells are all remaining valid cells of that slice.
pub fn emc_loss(
    scores: &ScoreTensor,
    gold: &GoldTensor,
    cfg: &EmcConfig,
) -> Result<LossResult, LossError> {
    check_shapes(scores, gold)?;
    let mut grad = vec![0.0; scores.data().len()];
    let mut per_class = Vec::new();
    let mut total = 0.0;
    for class in 0..scores.classes() {
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (i, j) in scores.valid_cells() {
            if gold.is_gold(class, i, j) {
                pos.push(scores.index(class, i, j));
            } else {
                neg.push(scores.index(class, i, j));
            }
        }
        let neg_scores: Vec<f64> = neg.iter().map(|&x| scores.data()[x]).collect();
        let pos_scores_negated: Vec<f64> = pos.iter().map(|&x| -scores.data()[x]).collect();
        let lse_n = (!neg.is_empty()).then(|| log_sum_exp(&neg_scores));
        let lse_p = (!pos.is_empty()).then(|| log_sum_exp(&pos_scores_negated));
        let value = match cfg.form {
            EmcForm::Product => match (lse_n, lse_p) {
                (Some(ln_), Some(lp)) => {
                    let t = ln_ + lp;
                    let coeff = crate::tape::stable_sigmoid(t);
                    for (&idx, &s) in neg.iter().zip(&neg_scores) {
                        grad[idx] += coeff * (s - ln_).exp();
                    }
                    for (&idx, &ns) in pos.iter().zip(&pos_scores_negated) {
                        grad[idx] -= coeff * (ns - lp).exp();
                    }
                    softplus(t)
                }
                _ => 0.0,
            },
            EmcForm::Additive => {
                let mut v = 0.0;
                if let Some(ln_) = lse_n {
                    let coeff = crate::tape::stable_sigmoid(ln_);
                    for (&idx, &s) in neg.iter().zip(&neg_scores) {
                        grad[idx] += coeff * (s - ln_).exp();
                    }
                    v += softplus(ln_);
                }
                if let Some(lp) = lse_p {
                    let coeff = crate::tape::stable_sigmoid(lp);
                    for (&idx, &ns) in pos.iter().zip(&pos_scores_negated) {
                        grad[idx] -= coeff * (ns - lp).exp();
                    }
                    v += softplus(lp);
                }
                v
            }
        };
        total += value;
        per_class.push(EmcClassTerms {
            class,
            positives: pos.len(),
            negatives: neg.len(),
            lse_negatives: lse_n,
            lse_negated_positives: lse_p,
            value,
        });
    }
    Ok(LossResult {
        value: total,
        grad,
        eiou: None,
        emc: Some(EmcTerms { per_class, total }),
    })
}

/// `beta * eiou + (1 - beta) * emc`, value and gradient alike.
pub fn combined_loss(
    scores: &ScoreTensor,
    gold: &GoldTensor,
    beta: f64,
    cfg: &EmcConfig,
) -> Result<LossResult, LossError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(LossError::BetaOutOfRange(beta));
    }
    let e = eiou_loss(scores, gold)?;
    let m = emc_loss(scores, gold, cfg)?;
    let grad = e
        .grad
        .iter()
        .zip(&m.grad)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect();
    Ok(LossResult {
        value: beta * e.value + (1.0 - beta) * m.value,
        grad,
        eiou: e.eiou,
        emc: m.emc,
    })
}

/// Central-difference check of a loss function's analytic gradient over
/// every valid cell; returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, scores: &ScoreTensor, step: f64) -> f64
where
    F: Fn(&ScoreTensor) -> LossResult,
{
    let base = loss_fn(scores);
    let mut probe = scores.clone();
    let mut worst = 0.0f64;
    for class in 0..scores.classes() {
        let cells: Vec<(usize, usize)> = scores.valid_cells().collect();
        for (i, j) in cells {
            let orig = probe.get(class, i, j);
            probe.set(class, i, j, orig + step);
            let up = loss_fn(&probe).value;
            probe.set(class, i, j, orig - step);
            let down = loss_fn(&probe).value;
            probe.set(class, i, j, orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = base.grad[probe.index(class, i, j)];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(EPS_REL_ERR);
            worst = worst.max(rel);
        }
    }
    worst
}
