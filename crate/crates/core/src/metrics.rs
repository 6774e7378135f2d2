//! Classification metrics for binary, multiclass and multilabel tasks.
//!
//! Inputs are `n×K` 0/1 label matrices and `n×K` score matrices as
//! produced by the classifiers. Binary tasks are scored on the positive
//! column (index 1); precision/recall/F1 still cover both classes.
//!
//! Conventions: a zero denominator yields 0 and a warning; multilabel
//! accuracy is exact-match; ROC thresholds predict positive when
//! `score ≥ threshold`.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TaskKind;

/// Tolerance the two AUC estimators must agree within.
pub const AUC_AGREEMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrfResult {
    pub per_class: Vec<Prf>,
    pub average: Prf,
    /// Number of zero denominators replaced by 0.
    pub zero_divisions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    /// `None` where the class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    pub average: f64,
}

fn check_shapes(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 {
        return Err(Error::Empty("label matrix"));
    }
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Per-column one-vs-rest counts.
pub fn confusion_counts(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<Vec<ConfusionCounts>> {
    check_shapes(y_true, y_pred)?;
    Ok(y_true
        .columns()
        .into_iter()
        .zip(y_pred.columns())
        .map(|(t, p)| {
            let mut c = ConfusionCounts::default();
            for (&a, &b) in t.iter().zip(p) {
                match (a > 0.5, b > 0.5) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            c
        })
        .collect())
}

/// Fraction of rows whose whole label vector matches. For single-label
/// tasks this is ordinary accuracy.
pub fn accuracy(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<f64> {
    check_shapes(y_true, y_pred)?;
    let hits = y_true
        .rows()
        .into_iter()
        .zip(y_pred.rows())
        .filter(|(t, p)| t.iter().zip(p.iter()).all(|(&a, &b)| (a > 0.5) == (b > 0.5)))
        .count();
    Ok(hits as f64 / y_true.nrows() as f64)
}

fn ratio(num: u64, den: u64, zero_divisions: &mut usize) -> f64 {
    if den == 0 {
        *zero_divisions += 1;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn prf_from_counts(c: &ConfusionCounts, zero_divisions: &mut usize) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp, zero_divisions);
    let recall = ratio(c.tp, c.tp + c.fn_, zero_divisions);
    // 2tp / (2tp + fp + fn) equals the harmonic mean of P and R but
    // rounds only once.
    let den = 2 * c.tp + c.fp + c.fn_;
    let f1 = if den == 0 { 0.0 } else { (2 * c.tp) as f64 / den as f64 };
    Prf { precision, recall, f1 }
}

pub fn precision_recall_f1(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    averaging: Averaging,
) -> Result<PrfResult> {
    let counts = confusion_counts(y_true, y_pred)?;
    let mut zero_divisions = 0;
    let per_class: Vec<Prf> = counts.iter().map(|c| prf_from_counts(c, &mut zero_divisions)).collect();
    let average = match averaging {
        Averaging::Macro => {
            let k = per_class.len() as f64;
            Prf {
                precision: per_class.iter().map(|p| p.precision).sum::<f64>() / k,
                recall: per_class.iter().map(|p| p.recall).sum::<f64>() / k,
                f1: per_class.iter().map(|p| p.f1).sum::<f64>() / k,
            }
        }
        Averaging::Micro => {
            let total = counts.iter().fold(ConfusionCounts::default(), |a, c| ConfusionCounts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
                tn: a.tn + c.tn,
            });
            prf_from_counts(&total, &mut zero_divisions)
        }
    };
    if zero_divisions > 0 {
        log::warn!("{zero_divisions} precision/recall denominators were zero and reported as 0");
    }
    Ok(PrfResult {
        per_class,
        average,
        zero_divisions,
    })
}

fn check_binary_inputs(labels: &[bool], scores: &[f64]) -> Result<(u64, u64)> {
    if labels.len() != scores.len() {
        return Err(Error::Validation(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score vector".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Cumulative (fp, tp) counts at each distinct threshold, highest first,
/// starting from (0, 0) at +∞.
fn count_steps(labels: &[bool], scores: &[f64]) -> (Vec<(u64, u64)>, Vec<f64>) {
    let order = descending(scores);
    let mut steps = vec![(0u64, 0u64)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        steps.push((fp, tp));
        thresholds.push(s);
    }
    (steps, thresholds)
}

/// Area under the ROC curve by the trapezoid rule over every distinct
/// threshold. Evaluated on integer counts so the only rounding is the
/// final division.
pub fn auc_trapezoid(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(labels, scores)?;
    let (steps, _) = count_steps(labels, scores);
    // twice the area in count units: Σ Δfp·(tpₖ + tpₖ₋₁)
    let twice: u128 = steps
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as u128 * (w[1].1 + w[0].1) as u128)
        .sum();
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` counted over all positive/negative pairs
/// (via sorting, not enumeration).
pub fn auc_pair_counting(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // doubled: 2 per won pair, 1 per tied pair
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut p_tied, mut n_tied) = (0u128, 0u128);
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                p_tied += 1;
            } else {
                n_tied += 1;
            }
            k += 1;
        }
        twice += p_tied * (2 * neg_below + n_tied);
        neg_below += n_tied;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Binary AUC: both estimators are evaluated and must agree.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let trap = auc_trapezoid(labels, scores)?;
    let pairs = auc_pair_counting(labels, scores)?;
    if (trap - pairs).abs() > AUC_AGREEMENT_TOL {
        return Err(Error::DegenerateInput(format!(
            "AUC estimators disagree: trapezoid {trap}, pair counting {pairs}"
        )));
    }
    Ok(trap)
}

fn column_labels(col: ArrayView1<f64>) -> Vec<bool> {
    col.iter().map(|&v| v > 0.5).collect()
}

/// Per-class and averaged AUC. Binary tasks use the positive column and
/// report the same value for both classes. Classes without both positives
/// and negatives are skipped with a warning; if every class is skipped the
/// AUC is undefined.
pub fn roc_auc(
    y_true: ArrayView2<f64>,
    scores: ArrayView2<f64>,
    task: TaskKind,
    averaging: Averaging,
) -> Result<AucResult> {
    check_shapes(y_true, scores)?;
    if task == TaskKind::Binary {
        let auc = binary_auc(&column_labels(y_true.column(1)), &scores.column(1).to_vec())?;
        return Ok(AucResult {
            per_class: vec![Some(auc), Some(auc)],
            average: auc,
        });
    }
    let mut per_class = Vec::with_capacity(y_true.ncols());
    for k in 0..y_true.ncols() {
        let labels = column_labels(y_true.column(k));
        match binary_auc(&labels, &scores.column(k).to_vec()) {
            Ok(a) => per_class.push(Some(a)),
            Err(Error::UndefinedAuc(msg)) => {
                log::warn!("AUC for class {k} skipped: {msg}");
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc("no class has both positives and negatives".into()));
    }
    let average = match averaging {
        Averaging::Macro => defined.iter().sum::<f64>() / defined.len() as f64,
        Averaging::Micro => {
            let labels: Vec<bool> = y_true.iter().map(|&v| v > 0.5).collect();
            binary_auc(&labels, &scores.iter().copied().collect::<Vec<_>>())?
        }
    };
    Ok(AucResult { per_class, average })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    /// Trapezoid area under the emitted points.
    pub fn area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) * 0.5)
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fpr,tpr,threshold\n");
        for i in 0..self.fpr.len() {
            out.push_str(&format!("{},{},{}\n", self.fpr[i], self.tpr[i], fmt_threshold(self.thresholds[i])));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else {
        format!("{t}")
    }
}

/// ROC staircase from (0,0) at threshold +∞ to (1,1) at the lowest score,
/// with collinear intermediate points removed.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<RocCurve> {
    let (pos, neg) = check_binary_inputs(labels, scores)?;
    let (steps, thresholds) = count_steps(labels, scores);
    let mut keep = vec![true; steps.len()];
    for i in 1..steps.len() - 1 {
        let (a, b, c) = (steps[i - 1], steps[i], steps[i + 1]);
        // collinear when the cross product of (b-a) and (c-b) vanishes
        let cross = (b.0 as i128 - a.0 as i128) * (c.1 as i128 - b.1 as i128)
            - (b.1 as i128 - a.1 as i128) * (c.0 as i128 - b.0 as i128);
        keep[i] = cross != 0;
    }
    let mut curve = RocCurve {
        fpr: Vec::new(),
        tpr: Vec::new(),
        thresholds: Vec::new(),
    };
    for (i, (&(fp, tp), &t)) in steps.iter().zip(&thresholds).enumerate() {
        if keep[i] {
            curve.fpr.push(fp as f64 / neg as f64);
            curve.tpr.push(tp as f64 / pos as f64);
            curve.thresholds.push(t);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub n: usize,
    pub averaging: Averaging,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub zero_divisions: usize,
}

pub fn full_report(
    y_true: ArrayView2<f64>,
    y_pred: ArrayView2<f64>,
    scores: ArrayView2<f64>,
    task: TaskKind,
    class_names: &[String],
    averaging: Averaging,
) -> Result<MetricsReport> {
    if class_names.len() != y_true.ncols() {
        return Err(Error::DimensionMismatch {
            expected: y_true.ncols(),
            actual: class_names.len(),
        });
    }
    let accuracy = accuracy(y_true, y_pred)?;
    let prf = precision_recall_f1(y_true, y_pred, averaging)?;
    let auc = roc_auc(y_true, scores, task, averaging)?;
    let counts = confusion_counts(y_true, y_pred)?;
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(k, name)| ClassMetrics {
            class: name.clone(),
            precision: prf.per_class[k].precision,
            recall: prf.per_class[k].recall,
            f1: prf.per_class[k].f1,
            auc: auc.per_class[k],
            support: counts[k].tp + counts[k].fn_,
        })
        .collect();
    Ok(MetricsReport {
        task,
        n: y_true.nrows(),
        averaging,
        accuracy,
        precision: prf.average.precision,
        recall: prf.average.recall,
        f1: prf.average.f1,
        auc: auc.average,
        per_class,
        zero_divisions: prf.zero_divisions,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// CSV with one row per class plus the averaged row; per-class rows
    /// leave accuracy empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,accuracy,recall,precision,f1,auc\n");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            match self.averaging {
                Averaging::Macro => "macro",
                Averaging::Micro => "micro",
            },
            self.accuracy,
            self.recall,
            self.precision,
            self.f1,
            self.auc
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{},,{},{},{},{}\n",
                csv_field(&c.class),
                c.recall,
                c.precision,
                c.f1,
                opt(c.auc)
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
