//! Kernel SVMs trained by sequential minimal optimization.
//!
//! Solves `max Σαᵢ − ½ΣΣ αᵢαⱼyᵢyⱼK(xᵢ,xⱼ)` subject to `0 ≤ αᵢ ≤ C`,
//! `Σαᵢyᵢ = 0`, updating the maximal-violating pair each step. Multiclass
//! and multilabel tasks train one binary machine per class; the model
//! stores the union of their support vectors.
//!
//! Kernel rows come from a precomputed matrix for up to
//! [`SmoSettings::full_matrix_max_rows`] rows and from an LRU row cache
//! beyond that. Training refuses any `n` whose full matrix would exceed
//! [`SmoSettings::memory_budget`].

use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelSchema, TaskKind};
use crate::linear::{binary_columns, check_c, check_features, check_labels, class_indices, head_targets, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// `1/(d·var(X))`, variance over all entries.
    Scale,
    /// `1/d`
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma_mode: GammaMode,
}

impl KernelSpec {
    pub const LINEAR: KernelSpec = KernelSpec {
        kind: KernelKind::Linear,
        gamma_mode: GammaMode::Scale,
    };

    pub fn rbf(gamma_mode: GammaMode) -> Self {
        Self {
            kind: KernelKind::Rbf,
            gamma_mode,
        }
    }

    /// Short label used in reports: `linear`, `rbf-scale`, `rbf-auto`,
    /// `rbf-0.5`.
    pub fn label(&self) -> String {
        match (self.kind, self.gamma_mode) {
            (KernelKind::Linear, _) => "linear".into(),
            (KernelKind::Rbf, GammaMode::Scale) => "rbf-scale".into(),
            (KernelKind::Rbf, GammaMode::Auto) => "rbf-auto".into(),
            (KernelKind::Rbf, GammaMode::Fixed(g)) => format!("rbf-{g}"),
        }
    }
}

impl std::str::FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "linear" => Ok(Self::LINEAR),
            "rbf" | "rbf-scale" => Ok(Self::rbf(GammaMode::Scale)),
            "rbf-auto" => Ok(Self::rbf(GammaMode::Auto)),
            _ => {
                let g = lower
                    .strip_prefix("rbf-")
                    .and_then(|g| g.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))?;
                if !(g > 0.0 && g.is_finite()) {
                    return Err(Error::Config(format!("RBF gamma must be positive, got {g}")));
                }
                Ok(Self::rbf(GammaMode::Fixed(g)))
            }
        }
    }
}

/// Kernel with its gamma fixed (ignored for the linear kernel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedKernel {
    pub spec: KernelSpec,
    pub gamma: f64,
}

impl ResolvedKernel {
    pub fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self.spec.kind {
            KernelKind::Linear => a.dot(&b),
            KernelKind::Rbf => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.gamma * d2).exp()
            }
        }
    }

    /// `K(a_i, b_j)` for all row pairs.
    pub fn matrix(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
        let mut k = a.dot(&b.t());
        if self.spec.kind == KernelKind::Rbf {
            let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
            let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
            let g = self.gamma;
            k.indexed_iter_mut().for_each(|((i, j), v)| {
                let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
                *v = (-g * d2).exp();
            });
        }
        k
    }
}

pub fn resolve_gamma(mode: GammaMode, x: ArrayView2<f64>) -> Result<f64> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    match mode {
        GammaMode::Auto => Ok(1.0 / d as f64),
        GammaMode::Fixed(g) if g > 0.0 && g.is_finite() => Ok(g),
        GammaMode::Fixed(g) => Err(Error::Config(format!("RBF gamma must be positive, got {g}"))),
        GammaMode::Scale => {
            let count = (n * d) as f64;
            let mean = x.sum() / count;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            if var > 0.0 {
                Ok(1.0 / (d as f64 * var))
            } else {
                Err(Error::DegenerateInput(
                    "feature variance is zero; gamma='scale' is undefined".into(),
                ))
            }
        }
    }
}

pub fn resolve(spec: KernelSpec, x: ArrayView2<f64>) -> Result<ResolvedKernel> {
    let gamma = match spec.kind {
        KernelKind::Linear => 0.0,
        KernelKind::Rbf => resolve_gamma(spec.gamma_mode, x)?,
    };
    Ok(ResolvedKernel { spec, gamma })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoSettings {
    /// Stop once the maximal KKT violation is at or below this value.
    pub tol: f64,
    pub max_updates: usize,
    pub full_matrix_max_rows: usize,
    /// Largest full kernel matrix, in bytes, training will accept.
    pub memory_budget: u64,
    /// Bytes given to the LRU row cache when the matrix is not precomputed.
    pub row_cache_bytes: u64,
}

impl Default for SmoSettings {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_updates: 1_000_000,
            full_matrix_max_rows: 8000,
            memory_budget: 4 << 30,
            row_cache_bytes: 512 << 20,
        }
    }
}

/// Source of kernel-matrix rows over the training set.
pub enum KernelRows<'a> {
    Full(Vec<Arc<[f64]>>),
    Cached {
        x: ArrayView2<'a, f64>,
        kernel: ResolvedKernel,
        norms: Vec<f64>,
        cache: LruCache<usize, Arc<[f64]>>,
    },
}

impl<'a> KernelRows<'a> {
    pub fn new(x: ArrayView2<'a, f64>, kernel: ResolvedKernel, settings: &SmoSettings) -> Result<Self> {
        let n = x.nrows();
        let required = (n as u64).saturating_mul(n as u64).saturating_mul(8);
        if required > settings.memory_budget {
            return Err(Error::MemoryGuard {
                n,
                required,
                budget: settings.memory_budget,
            });
        }
        if n <= settings.full_matrix_max_rows {
            let k = kernel.matrix(x, x);
            let rows = (0..n)
                .map(|i| {
                    // copy the upper triangle down so the matrix is exactly symmetric
                    (0..n).map(|j| if j >= i { k[[i, j]] } else { k[[j, i]] }).collect()
                })
                .collect();
            Ok(KernelRows::Full(rows))
        } else {
            let per_row = (n as u64 * 8).max(1);
            let capacity = (settings.row_cache_bytes / per_row).max(2) as usize;
            Ok(KernelRows::Cached {
                x,
                kernel,
                norms: x.rows().into_iter().map(|r| r.dot(&r)).collect(),
                cache: LruCache::new(NonZeroUsize::new(capacity).unwrap()),
            })
        }
    }

    pub fn row(&mut self, i: usize) -> Arc<[f64]> {
        match self {
            KernelRows::Full(rows) => rows[i].clone(),
            KernelRows::Cached { x, kernel, norms, cache } => {
                if let Some(r) = cache.get(&i) {
                    return r.clone();
                }
                let xi = x.row(i);
                let dots = x.dot(&xi);
                let row: Arc<[f64]> = match kernel.spec.kind {
                    KernelKind::Linear => dots.to_vec().into(),
                    KernelKind::Rbf => dots
                        .iter()
                        .zip(norms.iter())
                        .map(|(&dij, &nj)| (-kernel.gamma * (norms[i] + nj - 2.0 * dij).max(0.0)).exp())
                        .collect(),
                };
                cache.put(i, row.clone());
                row
            }
        }
    }

    pub fn diag(&mut self, i: usize) -> f64 {
        match self {
            KernelRows::Full(rows) => rows[i][i],
            KernelRows::Cached { x, kernel, .. } => kernel.eval(x.row(i), x.row(i)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoSolution {
    pub alpha: Array1<f64>,
    pub b: f64,
    pub updates: usize,
    pub max_violation: f64,
    pub converged: bool,
}

/// Binary SMO; `y` holds ±1 with both signs present.
pub fn solve_binary(rows: &mut KernelRows, y: &[f64], c: f64, settings: &SmoSettings) -> SmoSolution {
    const TAU: f64 = 1e-12;
    let n = y.len();
    let mut alpha = vec![0.0; n];
    // gradient of ½αᵀQα − Σα
    let mut grad = vec![-1.0; n];
    let diag: Vec<f64> = (0..n).map(|i| rows.diag(i)).collect();
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut updates = 0;
    let mut violation;
    loop {
        let mut i = usize::MAX;
        let mut m = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut big_m = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > m {
                m = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < big_m {
                big_m = v;
                j = t;
            }
        }
        violation = m - big_m;
        if i == usize::MAX || j == usize::MAX || violation <= settings.tol || updates >= settings.max_updates {
            break;
        }

        let qi = rows.row(i);
        let qj = rows.row(j);
        let (yi, yj) = (y[i], y[j]);
        let old_i = alpha[i];
        let old_j = alpha[j];
        // Q_ij = yᵢyⱼK_ij
        let quad = (diag[i] + diag[j] - 2.0 * qi[j]).max(TAU);
        let (mut ai, mut aj);
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = old_i - old_j;
            ai = old_i + delta;
            aj = old_j + delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = old_i + old_j;
            ai = old_i - delta;
            aj = old_j + delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let di = ai - old_i;
        let dj = aj - old_j;
        for t in 0..n {
            grad[t] += y[t] * (yi * qi[t] * di + yj * qj[t] * dj);
        }
        updates += 1;
    }

    // b = −mean(yᵢGᵢ) over free vectors, else the midpoint of the feasible range
    let mut sum = 0.0;
    let mut free = 0usize;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { 0.5 * (ub + lb) };
    let converged = violation <= settings.tol;
    if !converged {
        log::warn!("SMO stopped after {updates} updates with KKT violation {violation:.3e}");
    }
    SmoSolution {
        alpha: Array1::from(alpha),
        b: -rho,
        updates,
        max_violation: violation,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    /// `s×d`
    pub support_vectors: Array2<f64>,
    /// `K'×s`, entries `αᵢyᵢ` per head (zero where a vector is not a
    /// support vector of that head).
    pub dual_coefs: Array2<f64>,
    pub intercepts: Array1<f64>,
    pub kernel: ResolvedKernel,
    pub c: f64,
    pub schema: LabelSchema,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHeadStats {
    pub converged: bool,
    pub updates: usize,
    pub max_violation: f64,
}

pub fn train_kernel_svm(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    c: f64,
    spec: KernelSpec,
) -> Result<KernelModel> {
    train_kernel_svm_with(x, y, schema, c, spec, &SmoSettings::default()).map(|(m, _)| m)
}

pub fn train_kernel_svm_with(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    c: f64,
    spec: KernelSpec,
    settings: &SmoSettings,
) -> Result<(KernelModel, Vec<KernelHeadStats>)> {
    check_c(c)?;
    check_features(x)?;
    check_labels(y, schema, x.nrows())?;
    if schema.task() == TaskKind::Multiclass {
        let classes = class_indices(y);
        for k in 0..schema.num_classes() {
            if !classes.contains(&k) {
                return Err(Error::DegenerateLabels(format!(
                    "class {:?} has no training rows",
                    schema.class_names()[k]
                )));
            }
        }
    }
    let targets = head_targets(y, schema)?;
    let kernel = resolve(spec, x)?;
    let n = x.nrows();

    let sols: Vec<SmoSolution> = match KernelRows::new(x, kernel, settings)? {
        // heads share the precomputed rows
        KernelRows::Full(rows) => targets
            .par_iter()
            .map(|t| solve_binary(&mut KernelRows::Full(rows.clone()), t, c, settings))
            .collect(),
        cached => {
            let mut first = Some(cached);
            let mut out = Vec::with_capacity(targets.len());
            for t in &targets {
                let mut rows = match first.take() {
                    Some(r) => r,
                    None => KernelRows::new(x, kernel, settings)?,
                };
                out.push(solve_binary(&mut rows, t, c, settings));
            }
            out
        }
    };

    let mut used = vec![false; n];
    for s in &sols {
        for (u, &a) in used.iter_mut().zip(s.alpha.iter()) {
            *u |= a > 0.0;
        }
    }
    let sv_index: Vec<usize> = (0..n).filter(|&i| used[i]).collect();
    let support_vectors = x.select(Axis(0), &sv_index);
    let mut dual_coefs = Array2::zeros((sols.len(), sv_index.len()));
    for (k, (s, t)) in sols.iter().zip(&targets).enumerate() {
        for (col, &i) in sv_index.iter().enumerate() {
            dual_coefs[[k, col]] = s.alpha[i] * t[i];
        }
    }
    let intercepts = sols.iter().map(|s| s.b).collect();
    let stats = sols
        .iter()
        .map(|s| KernelHeadStats {
            converged: s.converged,
            updates: s.updates,
            max_violation: s.max_violation,
        })
        .collect();
    let model = KernelModel {
        support_vectors,
        dual_coefs,
        intercepts,
        kernel,
        c,
        schema: schema.clone(),
    };
    Ok((model, stats))
}

impl KernelModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.ncols()
    }

    /// Raw margins, `n×K'`.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        let k = self.kernel.matrix(x, self.support_vectors.view());
        Ok(k.dot(&self.dual_coefs.t()) + &self.intercepts)
    }
}

pub fn kernel_predict(m: &KernelModel, x: ArrayView2<f64>) -> Result<ScoreMatrix> {
    let z = m.decision_function(x)?;
    let scores = if m.schema.task() == TaskKind::Binary {
        binary_columns(z.column(0).to_owned(), false)
    } else {
        z
    };
    Ok(ScoreMatrix {
        scores,
        is_probability: false,
    })
}
