//! Regularized linear classifiers over embedding matrices.
//!
//! Every model minimizes `½‖w‖² + C·Σ loss(yᵢ, w·xᵢ + b)` per head, with the
//! intercept left unpenalized. Arithmetic is float64 throughout.
//!
//! | task       | logistic                     | linear SVM        |
//! |------------|------------------------------|-------------------|
//! | binary     | one head, sigmoid            | one head          |
//! | multiclass | multinomial (softmax), K rows| one-vs-rest, K    |
//! | multilabel | one-vs-rest sigmoid, K rows  | one-vs-rest, K    |
//!
//! Label matrices are `n×K` with 0/1 entries (one-hot for single-label
//! tasks); for binary tasks column 1 is the positive class.

pub mod dcd;
pub mod lbfgs;
pub mod loss;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelSchema, TaskKind};
use dcd::DcdSettings;
use lbfgs::LbfgsSettings;
use loss::{sigmoid, softmax_rows, BinaryLogistic, Multinomial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearKind {
    LogRegBinary,
    LogRegMultinomial,
    LogRegOvR,
    LinearSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmLoss {
    Hinge,
    SquaredHinge,
}

impl SvmLoss {
    pub fn name(self) -> &'static str {
        match self {
            SvmLoss::Hinge => "hinge",
            SvmLoss::SquaredHinge => "squared_hinge",
        }
    }
}

impl std::str::FromStr for SvmLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hinge" => Ok(SvmLoss::Hinge),
            "squared_hinge" => Ok(SvmLoss::SquaredHinge),
            other => Err(Error::Config(format!("unknown SVM loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearHyper {
    pub c: f64,
    /// Set for SVMs only.
    pub loss: Option<SvmLoss>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub kind: LinearKind,
    /// `K'×d`; K' = 1 for binary tasks.
    pub weights: Array2<f64>,
    pub intercepts: Array1<f64>,
    pub hyper: LinearHyper,
    pub schema: LabelSchema,
}

/// Classifier output, always `n×K` (binary tasks get two columns: the
/// negative-class score then the positive-class score).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
    pub is_probability: bool,
}

/// Solver outcome for one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadStats {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Duality gap for SVM heads.
    pub gap: Option<f64>,
}

pub(crate) fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("C must be positive and finite, got {c}")));
    }
    Ok(())
}

pub(crate) fn check_features(x: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    for (i, row) in x.rows().into_iter().enumerate() {
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {i}")));
        }
    }
    Ok(())
}

pub(crate) fn check_labels(y: ArrayView2<f64>, schema: &LabelSchema, n: usize) -> Result<()> {
    if y.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.nrows(),
        });
    }
    if y.ncols() != schema.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: schema.num_classes(),
            actual: y.ncols(),
        });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("label entries must be 0 or 1".into()));
    }
    Ok(())
}

/// Class index per row (first maximum) for single-label tasks.
pub fn class_indices(y: ArrayView2<f64>) -> Vec<usize> {
    y.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// ±1 targets for each one-vs-rest head; binary tasks use column 1 only.
/// Fails unless every head sees both signs.
pub(crate) fn head_targets(y: ArrayView2<f64>, schema: &LabelSchema) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<usize> = match schema.task() {
        TaskKind::Binary => vec![1],
        _ => (0..schema.num_classes()).collect(),
    };
    cols.into_iter()
        .map(|k| {
            let t: Vec<f64> = y.column(k).iter().map(|&v| if v > 0.5 { 1.0 } else { -1.0 }).collect();
            let pos = t.iter().filter(|&&v| v > 0.0).count();
            if pos == 0 || pos == t.len() {
                return Err(Error::DegenerateLabels(format!(
                    "class {:?} is {} in every training row",
                    schema.class_names()[k],
                    if pos == 0 { "absent" } else { "present" }
                )));
            }
            Ok(t)
        })
        .collect()
}

fn require_all_classes(classes: &[usize], schema: &LabelSchema) -> Result<()> {
    let mut seen = vec![false; schema.num_classes()];
    for &c in classes {
        seen[c] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::DegenerateLabels(format!(
            "class {:?} has no training rows",
            schema.class_names()[k]
        )));
    }
    Ok(())
}

fn assemble(heads: Vec<(Vec<f64>, f64)>, d: usize) -> (Array2<f64>, Array1<f64>) {
    let mut w = Array2::zeros((heads.len(), d));
    let mut b = Array1::zeros(heads.len());
    for (k, (wk, bk)) in heads.into_iter().enumerate() {
        w.row_mut(k).assign(&Array1::from(wk));
        b[k] = bk;
    }
    (w, b)
}

fn ensure_finite(w: &Array2<f64>, b: &Array1<f64>) -> Result<()> {
    if w.iter().chain(b.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::DegenerateInput("solver produced non-finite parameters".into()))
    }
}

pub fn train_logreg(x: ArrayView2<f64>, y: ArrayView2<f64>, schema: &LabelSchema, c: f64) -> Result<LinearModel> {
    train_logreg_with(x, y, schema, c, &LbfgsSettings::default()).map(|(m, _)| m)
}

pub fn train_logreg_with(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    c: f64,
    settings: &LbfgsSettings,
) -> Result<(LinearModel, Vec<HeadStats>)> {
    check_c(c)?;
    check_features(x)?;
    check_labels(y, schema, x.nrows())?;
    let d = x.ncols();
    let hyper = LinearHyper { c, loss: None };

    if schema.task() == TaskKind::Multiclass {
        let classes = class_indices(y);
        require_all_classes(&classes, schema)?;
        let k = schema.num_classes();
        let obj = Multinomial {
            x: x.view(),
            classes: &classes,
            k,
            c,
        };
        let r = lbfgs::minimize(&obj, vec![0.0; k * (d + 1)], settings);
        warn_unconverged("multinomial logistic regression", r.converged, r.grad_inf_norm);
        let (weights, intercepts) = obj.unpack(&r.params);
        ensure_finite(&weights, &intercepts)?;
        let stats = HeadStats {
            converged: r.converged,
            iterations: r.iterations,
            objective: r.value,
            gap: None,
        };
        let model = LinearModel {
            kind: LinearKind::LogRegMultinomial,
            weights,
            intercepts,
            hyper,
            schema: schema.clone(),
        };
        return Ok((model, vec![stats]));
    }

    let targets = head_targets(y, schema)?;
    let results: Vec<_> = targets
        .par_iter()
        .map(|t| {
            let y = ndarray::ArrayView1::from(t.as_slice());
            let obj = BinaryLogistic { x: x.view(), y, c };
            lbfgs::minimize(&obj, vec![0.0; d + 1], settings)
        })
        .collect();
    let mut heads = Vec::with_capacity(results.len());
    let mut stats = Vec::with_capacity(results.len());
    for r in results {
        warn_unconverged("logistic regression", r.converged, r.grad_inf_norm);
        stats.push(HeadStats {
            converged: r.converged,
            iterations: r.iterations,
            objective: r.value,
            gap: None,
        });
        heads.push((r.params[..d].to_vec(), r.params[d]));
    }
    let (weights, intercepts) = assemble(heads, d);
    ensure_finite(&weights, &intercepts)?;
    let kind = if schema.task() == TaskKind::Binary {
        LinearKind::LogRegBinary
    } else {
        LinearKind::LogRegOvR
    };
    let model = LinearModel {
        kind,
        weights,
        intercepts,
        hyper,
        schema: schema.clone(),
    };
    Ok((model, stats))
}

fn warn_unconverged(what: &str, converged: bool, grad: f64) {
    if !converged {
        log::warn!("{what} hit the iteration cap with gradient ∞-norm {grad:.3e}");
    }
}

pub fn train_linear_svm(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    c: f64,
    loss: SvmLoss,
) -> Result<LinearModel> {
    train_linear_svm_with(x, y, schema, c, loss, &DcdSettings::default()).map(|(m, _)| m)
}

pub fn train_linear_svm_with(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    c: f64,
    loss: SvmLoss,
    settings: &DcdSettings,
) -> Result<(LinearModel, Vec<HeadStats>)> {
    check_c(c)?;
    check_features(x)?;
    check_labels(y, schema, x.nrows())?;
    if schema.task() == TaskKind::Multiclass {
        require_all_classes(&class_indices(y), schema)?;
    }
    let d = x.ncols();
    let targets = head_targets(y, schema)?;
    let sols: Vec<_> = targets
        .par_iter()
        .map(|t| dcd::solve_binary(x, t, c, loss, settings))
        .collect();
    let mut heads = Vec::with_capacity(sols.len());
    let mut stats = Vec::with_capacity(sols.len());
    for s in sols {
        stats.push(HeadStats {
            converged: s.converged,
            iterations: s.epochs,
            objective: s.primal,
            gap: Some(s.gap()),
        });
        heads.push((s.w.to_vec(), s.b));
    }
    let (weights, intercepts) = assemble(heads, d);
    ensure_finite(&weights, &intercepts)?;
    let model = LinearModel {
        kind: LinearKind::LinearSvm,
        weights,
        intercepts,
        hyper: LinearHyper { c, loss: Some(loss) },
        schema: schema.clone(),
    };
    Ok((model, stats))
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Raw margins `X·Wᵀ + b`, shape `n×K'`.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        Ok(x.dot(&self.weights.t()) + &self.intercepts)
    }
}

/// Expand single-head binary output into `[neg, pos]` columns.
pub(crate) fn binary_columns(pos: Array1<f64>, probability: bool) -> Array2<f64> {
    let mut out = Array2::zeros((pos.len(), 2));
    for (i, &p) in pos.iter().enumerate() {
        out[[i, 0]] = if probability { 1.0 - p } else { -p };
        out[[i, 1]] = p;
    }
    out
}

pub fn predict_scores(m: &LinearModel, x: ArrayView2<f64>) -> Result<ScoreMatrix> {
    let mut z = m.decision_function(x)?;
    let (scores, is_probability) = match m.kind {
        LinearKind::LogRegBinary => (binary_columns(z.column(0).mapv(sigmoid), true), true),
        LinearKind::LogRegMultinomial => {
            softmax_rows(&mut z);
            (z, true)
        }
        LinearKind::LogRegOvR => (z.mapv(sigmoid), true),
        LinearKind::LinearSvm => {
            if m.schema.task() == TaskKind::Binary {
                (binary_columns(z.column(0).to_owned(), false), false)
            } else {
                (z, false)
            }
        }
    };
    Ok(ScoreMatrix { scores, is_probability })
}

/// 0/1 label matrix from scores: argmax for single-label tasks (ties go
/// to the lowest index), per-column threshold otherwise (strictly above
/// 0.5 for probabilities, above 0 for margins).
pub fn labels_from_scores(s: &ScoreMatrix, task: TaskKind) -> Array2<f64> {
    let (n, k) = s.scores.dim();
    let mut out = Array2::zeros((n, k));
    if task.is_single_label() {
        for (i, row) in s.scores.axis_iter(Axis(0)).enumerate() {
            out[[i, argmax(row.iter().copied())]] = 1.0;
        }
    } else {
        let threshold = if s.is_probability { 0.5 } else { 0.0 };
        out.zip_mut_with(&s.scores, |o, &v| *o = if v > threshold { 1.0 } else { 0.0 });
    }
    out
}

pub fn predict_labels(m: &LinearModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(labels_from_scores(&predict_scores(m, x)?, m.schema.task()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::loss::Objective;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn schema(task: TaskKind, k: usize) -> LabelSchema {
        LabelSchema::new(task, (0..k).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn onehot(classes: &[usize], k: usize) -> Array2<f64> {
        let mut y = Array2::zeros((classes.len(), k));
        for (i, &c) in classes.iter().enumerate() {
            y[[i, c]] = 1.0;
        }
        y
    }

    fn fd_check(obj: &dyn Objective, p: &[f64]) {
        let mut g = vec![0.0; p.len()];
        obj.value_grad(p, &mut g);
        for j in 0..p.len() {
            let h = 1e-6 * (1.0 + p[j].abs());
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[j] += h;
            b[j] -= h;
            let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
            assert!(rel < 1e-5, "param {j}: analytic {} vs fd {fd}", g[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(2..20);
            let d = rng.random_range(1..5);
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
            let y: Array1<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let p: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
            fd_check(&BinaryLogistic { x: x.view(), y: y.view(), c: 1.3 }, &p);
            // keep margins away from the squared-hinge kink
            let sq = loss::SquaredHinge { x: x.view(), y: y.view(), c: 0.7 };
            let z = x.dot(&ArrayView1::from(&p[..d])) + p[d];
            if z.iter().zip(&y).all(|(zi, yi)| (1.0 - zi * yi).abs() > 1e-3) {
                fd_check(&sq, &p);
            }
            let k = 3;
            let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pm: Vec<f64> = (0..k * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
            fd_check(
                &Multinomial {
                    x: x.view(),
                    classes: &classes,
                    k,
                    c: 2.0,
                },
                &pm,
            );
        }
    }

    use ndarray::ArrayView1;

    #[test]
    fn symmetric_pair_has_zero_intercept() {
        let x = array![[1.0], [-1.0]];
        let y = onehot(&[1, 0], 2);
        let m = train_logreg(x.view(), y.view(), &schema(TaskKind::Binary, 2), 1.0).unwrap();
        assert!(m.weights[[0, 0]] > 0.0);
        assert!(m.intercepts[0].abs() < 1e-6);
        let s = predict_scores(&m, array![[0.0]].view()).unwrap();
        assert!((s.scores[[0, 1]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dot_product_scores() {
        let m = LinearModel {
            kind: LinearKind::LinearSvm,
            weights: array![[1.0, 0.0]],
            intercepts: array![0.0],
            hyper: LinearHyper {
                c: 1.0,
                loss: Some(SvmLoss::Hinge),
            },
            schema: schema(TaskKind::Binary, 2),
        };
        let s = predict_scores(&m, array![[3.0, 7.0]].view()).unwrap();
        assert_eq!(s.scores[[0, 1]], 3.0);
        assert!(!s.is_probability);
        assert!(matches!(
            predict_scores(&m, array![[1.0]].view()),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn equal_logits_give_uniform_softmax() {
        let m = LinearModel {
            kind: LinearKind::LogRegMultinomial,
            weights: Array2::zeros((3, 2)),
            intercepts: Array1::zeros(3),
            hyper: LinearHyper { c: 1.0, loss: None },
            schema: schema(TaskKind::Multiclass, 3),
        };
        let s = predict_scores(&m, array![[1.0, 2.0]].view()).unwrap();
        for k in 0..3 {
            assert!((s.scores[[0, k]] - 1.0 / 3.0).abs() < 1e-15);
        }
        // exact tie: lowest index wins
        assert_eq!(labels_from_scores(&s, TaskKind::Multiclass).row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn label_rules() {
        let p = ScoreMatrix {
            scores: array![[0.2, 0.7, 0.1]],
            is_probability: true,
        };
        assert_eq!(labels_from_scores(&p, TaskKind::Multiclass).row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        let m = ScoreMatrix {
            scores: array![[0.3, -0.2]],
            is_probability: false,
        };
        assert_eq!(labels_from_scores(&m, TaskKind::Multilabel).row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let x = array![[1.0], [2.0]];
        let y = onehot(&[1, 1], 2);
        let s = schema(TaskKind::Binary, 2);
        assert!(matches!(train_logreg(x.view(), y.view(), &s, 1.0), Err(Error::DegenerateLabels(_))));
        assert!(matches!(
            train_linear_svm(x.view(), y.view(), &s, 1.0, SvmLoss::Hinge),
            Err(Error::DegenerateLabels(_))
        ));
        let bad = array![[f64::NAN], [2.0]];
        let y = onehot(&[0, 1], 2);
        assert!(matches!(train_logreg(bad.view(), y.view(), &s, 1.0), Err(Error::NonFinite(_))));
    }

    fn blobs(seed: u64, n: usize, d: usize, k: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let classes: Vec<usize> = (0..n).map(|i| i % k).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            let centre = if j % k == classes[i] { 2.0 } else { 0.0 };
            centre + rng.random_range(-1.0..1.0)
        });
        (x, classes)
    }

    #[test]
    fn multilabel_is_columnwise_binary() {
        let (x, _) = blobs(5, 40, 3, 3);
        let mut rng = SplitMix64::seed_from_u64(9);
        let y = Array2::from_shape_fn((40, 3), |(i, j)| {
            if x[[i, j]] + rng.random_range(-0.5..0.5) > 1.0 {
                1.0
            } else {
                0.0
            }
        });
        let ml = schema(TaskKind::Multilabel, 3);
        let bin = schema(TaskKind::Binary, 2);
        let m = train_logreg(x.view(), y.view(), &ml, 1.0).unwrap();
        let svm = train_linear_svm(x.view(), y.view(), &ml, 1.0, SvmLoss::SquaredHinge).unwrap();
        for k in 0..3 {
            let col: Vec<usize> = y.column(k).iter().map(|&v| v as usize).collect();
            let yk = onehot(&col, 2);
            let mk = train_logreg(x.view(), yk.view(), &bin, 1.0).unwrap();
            assert_eq!(m.weights.row(k), mk.weights.row(0));
            assert_eq!(m.intercepts[k], mk.intercepts[0]);
            let sk = train_linear_svm(x.view(), yk.view(), &bin, 1.0, SvmLoss::SquaredHinge).unwrap();
            assert_eq!(svm.weights.row(k), sk.weights.row(0));
        }
    }

    #[test]
    fn multinomial_rows_sum_to_one_and_fit() {
        let (x, classes) = blobs(1, 60, 3, 3);
        let y = onehot(&classes, 3);
        let (m, stats) = train_logreg_with(
            x.view(),
            y.view(),
            &schema(TaskKind::Multiclass, 3),
            1.0,
            &LbfgsSettings::default(),
        )
        .unwrap();
        assert!(stats[0].converged);
        let s = predict_scores(&m, x.view()).unwrap();
        for row in s.scores.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let pred = class_indices(labels_from_scores(&s, TaskKind::Multiclass).view());
        let acc = pred.iter().zip(&classes).filter(|(a, b)| a == b).count() as f64 / 60.0;
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn hinge_and_squared_hinge_agree_on_separable_signs() {
        let (x, classes) = blobs(2, 50, 2, 2);
        let y = onehot(&classes, 2);
        let s = schema(TaskKind::Binary, 2);
        let a = train_linear_svm(x.view(), y.view(), &s, 10.0, SvmLoss::Hinge).unwrap();
        let b = train_linear_svm(x.view(), y.view(), &s, 10.0, SvmLoss::SquaredHinge).unwrap();
        assert_eq!(predict_labels(&a, x.view()).unwrap(), predict_labels(&b, x.view()).unwrap());
    }

    #[test]
    fn svm_norm_grows_with_c() {
        let (x, classes) = blobs(4, 80, 2, 2);
        let y = onehot(&classes, 2);
        let s = schema(TaskKind::Binary, 2);
        let mut last = 0.0;
        for c in [0.1, 1.0, 10.0, 100.0] {
            let (m, stats) = train_linear_svm_with(x.view(), y.view(), &s, c, SvmLoss::Hinge, &DcdSettings::default()).unwrap();
            assert!(stats[0].converged);
            let norm = m.weights.row(0).dot(&m.weights.row(0)).sqrt();
            assert!(norm >= last - 1e-3, "C={c}: {norm} < {last}");
            last = norm;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (x, classes) = blobs(8, 60, 4, 3);
        let y = onehot(&classes, 3);
        let s = schema(TaskKind::Multiclass, 3);
        let a = train_linear_svm(x.view(), y.view(), &s, 1.0, SvmLoss::Hinge).unwrap();
        let b = train_linear_svm(x.view(), y.view(), &s, 1.0, SvmLoss::Hinge).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn argmax_invariant_under_monotone_transform(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in -3.0f64..3.0,
            scale in 0.1f64..4.0,
        ) {
            let s = ScoreMatrix { scores: Array2::from_shape_vec((4, 3), vals).unwrap(), is_probability: false };
            let t = ScoreMatrix { scores: s.scores.mapv(|v| (scale * v + shift).exp()), is_probability: false };
            prop_assert_eq!(
                labels_from_scores(&s, TaskKind::Multiclass),
                labels_from_scores(&t, TaskKind::Multiclass)
            );
        }

        #[test]
        fn svm_certificate_holds(seed in 0u64..1000, c in 0.05f64..50.0, sq in any::<bool>()) {
            let (x, classes) = blobs(seed, 24, 3, 2);
            let mut classes = classes;
            // flip a few labels to make it non-separable
            classes[0] = 1 - classes[0];
            classes[5] = 1 - classes[5];
            let yv: Vec<f64> = classes.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect();
            let loss = if sq { SvmLoss::SquaredHinge } else { SvmLoss::Hinge };
            let sol = dcd::solve_binary(x.view(), &yv, c, loss, &DcdSettings { seed, ..Default::default() });
            prop_assert!(sol.converged);
            prop_assert!(sol.gap() <= 1e-3 * sol.primal.abs());
            prop_assert!(sol.gap() >= -1e-9 * sol.primal.abs());
            let upper = if sq { f64::INFINITY } else { c };
            prop_assert!(sol.alpha.iter().all(|&a| (0.0..=upper).contains(&a)));
            let eq: f64 = sol.alpha.iter().zip(&yv).map(|(a, y)| a * y).sum();
            prop_assert!(eq.abs() <= 1e-9 * (1.0 + sol.alpha.sum()));
        }
    }
}
