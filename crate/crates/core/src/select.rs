//! K-fold grid search over classifier hyperparameters.
//!
//! Every (cell, fold) pair is an independent job: train on the other
//! folds, score macro AUC on the held-out fold. Jobs run on the rayon pool
//! and are assembled in grid order, so results do not depend on
//! scheduling. A fold whose training labels are degenerate or whose
//! held-out AUC is undefined scores 0.5 and logs a warning.

use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelSchema, TaskKind};
use crate::kernel::{train_kernel_svm_with, KernelSpec, SmoSettings};
use crate::linear::dcd::DcdSettings;
use crate::linear::lbfgs::LbfgsSettings;
use crate::linear::{class_indices, train_linear_svm_with, train_logreg_with, SvmLoss};
use crate::metrics::{roc_auc, Averaging};
use crate::model::TrainedModel;

pub const DEFAULT_C_VALUES: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Logreg,
    LinearSvm,
    KernelSvm,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Logreg => "logreg",
            Family::LinearSvm => "linear-svm",
            Family::KernelSvm => "kernel-svm",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "logreg" | "logistic" | "lr" => Ok(Family::Logreg),
            "linear-svm" | "svm" => Ok(Family::LinearSvm),
            "kernel-svm" | "svc" => Ok(Family::KernelSvm),
            other => Err(Error::Config(format!("unknown classifier family {other:?}"))),
        }
    }
}

/// One hyperparameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum CellConfig {
    Logreg { c: f64 },
    LinearSvm { c: f64, loss: SvmLoss },
    KernelSvm { c: f64, kernel: KernelSpec },
}

impl CellConfig {
    pub fn c(&self) -> f64 {
        match *self {
            CellConfig::Logreg { c } | CellConfig::LinearSvm { c, .. } | CellConfig::KernelSvm { c, .. } => c,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            CellConfig::Logreg { .. } => Family::Logreg,
            CellConfig::LinearSvm { .. } => Family::LinearSvm,
            CellConfig::KernelSvm { .. } => Family::KernelSvm,
        }
    }

    /// Compact label, e.g. `C=10;loss=hinge`.
    pub fn label(&self) -> String {
        match self {
            CellConfig::Logreg { c } => format!("C={c}"),
            CellConfig::LinearSvm { c, loss } => format!("C={c};loss={}", loss.name()),
            CellConfig::KernelSvm { c, kernel } => format!("C={c};kernel={}", kernel.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub c_values: Vec<f64>,
    pub losses: Vec<SvmLoss>,
    pub kernels: Vec<KernelSpec>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            c_values: DEFAULT_C_VALUES.to_vec(),
            losses: vec![SvmLoss::Hinge, SvmLoss::SquaredHinge],
            kernels: vec![
                KernelSpec::LINEAR,
                KernelSpec::rbf(crate::kernel::GammaMode::Scale),
                KernelSpec::rbf(crate::kernel::GammaMode::Auto),
            ],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self, family: Family) -> Result<()> {
        if self.c_values.is_empty() {
            return Err(Error::Config("grid has no C values".into()));
        }
        if let Some(c) = self.c_values.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("grid C values must be positive, got {c}")));
        }
        match family {
            Family::LinearSvm if self.losses.is_empty() => Err(Error::Config("grid has no SVM losses".into())),
            Family::KernelSvm if self.kernels.is_empty() => Err(Error::Config("grid has no kernels".into())),
            _ => Ok(()),
        }
    }

    /// Cells in declaration order: C outermost, then loss or kernel.
    pub fn cells(&self, family: Family) -> Vec<CellConfig> {
        let mut out = Vec::new();
        for &c in &self.c_values {
            match family {
                Family::Logreg => out.push(CellConfig::Logreg { c }),
                Family::LinearSvm => out.extend(self.losses.iter().map(|&loss| CellConfig::LinearSvm { c, loss })),
                Family::KernelSvm => out.extend(self.kernels.iter().map(|&kernel| CellConfig::KernelSvm { c, kernel })),
            }
        }
        out
    }
}

/// Deterministic solver settings shared by every job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub lbfgs: LbfgsSettings,
    pub dcd: DcdSettings,
    pub smo: SmoSettings,
}

impl SolverSettings {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            lbfgs: LbfgsSettings::default(),
            dcd: DcdSettings {
                seed,
                ..Default::default()
            },
            smo: SmoSettings::default(),
        }
    }
}

pub fn train_cell(
    config: &CellConfig,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    settings: &SolverSettings,
) -> Result<TrainedModel> {
    Ok(match *config {
        CellConfig::Logreg { c } => TrainedModel::Linear(train_logreg_with(x, y, schema, c, &settings.lbfgs)?.0),
        CellConfig::LinearSvm { c, loss } => {
            TrainedModel::Linear(train_linear_svm_with(x, y, schema, c, loss, &settings.dcd)?.0)
        }
        CellConfig::KernelSvm { c, kernel } => {
            TrainedModel::Kernel(train_kernel_svm_with(x, y, schema, c, kernel, &settings.smo)?.0)
        }
    })
}

/// Validation index sets for k-fold CV. Single-label tasks are stratified:
/// each class is shuffled and dealt round-robin, continuing across
/// classes, so fold sizes differ by at most one. Multilabel rows are
/// shuffled and dealt without stratification. Indices within a fold are
/// ascending.
pub fn kfold_indices(n: usize, k: usize, seed: u64, labels: ArrayView2<f64>, task: TaskKind) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Validation(format!("{n} rows cannot fill {k} folds")));
    }
    if labels.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.nrows(),
        });
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if task.is_single_label() {
        let classes = class_indices(labels);
        let mut g = vec![Vec::new(); labels.ncols()];
        for (i, &c) in classes.iter().enumerate() {
            g[c].push(i);
        }
        g
    } else {
        vec![(0..n).collect()]
    };
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    let mut slot = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn training_rows(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Model trained on every fold except `fold`.
pub fn fit_fold(
    config: &CellConfig,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    folds: &[Vec<usize>],
    fold: usize,
    settings: &SolverSettings,
) -> Result<TrainedModel> {
    let train = training_rows(x.nrows(), &folds[fold]);
    let xt = x.select(Axis(0), &train);
    let yt = y.select(Axis(0), &train);
    train_cell(config, xt.view(), yt.view(), schema, settings)
}

/// Macro AUC of `model` on the rows of `fold`.
pub fn score_fold(model: &TrainedModel, x: ArrayView2<f64>, y: ArrayView2<f64>, fold: &[usize]) -> Result<f64> {
    let xv = x.select(Axis(0), fold);
    let yv = y.select(Axis(0), fold);
    let s = model.predict_scores(xv.view())?;
    Ok(roc_auc(yv.view(), s.scores.view(), model.schema().task(), Averaging::Macro)?.average)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: CellConfig,
    pub fold_auc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Folds scored 0.5 because of degenerate labels.
    pub degenerate_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub family: Family,
    pub folds: usize,
    pub seed: u64,
    pub cells: Vec<CellResult>,
    pub winner: usize,
}

impl CvResult {
    pub fn winner_cell(&self) -> &CellResult {
        &self.cells[self.winner]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,config,fold,auc\n");
        for cell in &self.cells {
            for (f, auc) in cell.fold_auc.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", self.family.name(), cell.config.label(), f, auc));
            }
        }
        out
    }

    pub fn winner_json(&self) -> serde_json::Value {
        let w = self.winner_cell();
        serde_json::json!({
            "family": self.family.name(),
            "config": w.config.label(),
            "params": w.config,
            "mean_auc": w.mean,
            "std_auc": w.std,
            "fold_auc": w.fold_auc,
            "folds": self.folds,
            "seed": self.seed,
        })
    }

    pub fn write(&self, csv_path: &Path, winner_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(&self.winner_json()).expect("json");
        std::fs::write(winner_path, json + "\n").map_err(|e| Error::io(winner_path, e))
    }
}

/// Index of the best cell: highest mean, then smaller C, then earlier in
/// the grid.
pub fn select_winner(cells: &[CellResult]) -> usize {
    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        if c.mean > b.mean || (c.mean == b.mean && c.config.c() < b.config.c()) {
            best = i;
        }
    }
    best
}

pub struct SearchOutcome {
    pub cv: CvResult,
    pub model: TrainedModel,
}

pub fn grid_search(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    family: Family,
    grid: &HyperGrid,
    seed: u64,
) -> Result<SearchOutcome> {
    grid_search_with(x, y, schema, family, grid, seed, DEFAULT_FOLDS, &SolverSettings::with_seed(seed))
}

#[allow(clippy::too_many_arguments)]
pub fn grid_search_with(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    schema: &LabelSchema,
    family: Family,
    grid: &HyperGrid,
    seed: u64,
    k: usize,
    settings: &SolverSettings,
) -> Result<SearchOutcome> {
    grid.validate(family)?;
    let folds = kfold_indices(x.nrows(), k, seed, y, schema.task())?;
    let configs = grid.cells(family);
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let scores: Vec<Result<(f64, bool)>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let fitted = fit_fold(&configs[c], x, y, schema, &folds, f, settings)
                .and_then(|m| score_fold(&m, x, y, &folds[f]));
            match fitted {
                Ok(auc) => Ok((auc, false)),
                Err(Error::DegenerateLabels(msg) | Error::UndefinedAuc(msg)) => {
                    log::warn!("{} fold {f}: {msg}; scored 0.5", configs[c].label());
                    Ok((0.5, true))
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut cells: Vec<CellResult> = configs
        .iter()
        .map(|&config| CellResult {
            config,
            fold_auc: Vec::with_capacity(k),
            mean: 0.0,
            std: 0.0,
            degenerate_folds: Vec::new(),
        })
        .collect();
    for (&(c, f), r) in jobs.iter().zip(scores) {
        let (auc, degenerate) = r?;
        cells[c].fold_auc.push(auc);
        if degenerate {
            cells[c].degenerate_folds.push(f);
        }
    }
    for cell in &mut cells {
        let m = cell.fold_auc.iter().sum::<f64>() / k as f64;
        cell.mean = m;
        cell.std = (cell.fold_auc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / k as f64).sqrt();
    }
    let winner = select_winner(&cells);
    let model = train_cell(&cells[winner].config, x, y, schema, settings)?;
    Ok(SearchOutcome {
        cv: CvResult {
            family,
            folds: k,
            seed,
            cells,
            winner,
        },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn binary_labels(pos: &[bool]) -> Array2<f64> {
        Array2::from_shape_fn((pos.len(), 2), |(i, j)| ((j == 1) == pos[i]) as u8 as f64)
    }

    #[test]
    fn ten_rows_five_folds() {
        let y = binary_labels(&[true; 10]);
        let folds = kfold_indices(10, 5, 1, y.view(), TaskKind::Binary).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, kfold_indices(10, 5, 1, y.view(), TaskKind::Binary).unwrap());
        assert!(kfold_indices(4, 5, 1, y.slice(ndarray::s![..4, ..]), TaskKind::Binary).is_err());
    }

    #[test]
    fn stratification_spreads_minority() {
        let pos = [true, true, false, true, true, true, false, true, true, true];
        let y = binary_labels(&pos);
        for seed in 0..20 {
            let folds = kfold_indices(10, 5, seed, y.view(), TaskKind::Binary).unwrap();
            for f in folds {
                assert!(f.iter().filter(|&&i| !pos[i]).count() <= 1);
            }
        }
    }

    #[test]
    fn ties_prefer_smaller_c_then_grid_order() {
        let cell = |c, loss, mean| CellResult {
            config: CellConfig::LinearSvm { c, loss },
            fold_auc: vec![],
            mean,
            std: 0.0,
            degenerate_folds: vec![],
        };
        let cells = vec![
            cell(10.0, SvmLoss::Hinge, 0.9),
            cell(1.0, SvmLoss::SquaredHinge, 0.9),
            cell(1.0, SvmLoss::Hinge, 0.9),
            cell(100.0, SvmLoss::Hinge, 0.8),
        ];
        assert_eq!(select_winner(&cells), 1);
    }

    #[test]
    fn cell_order_and_labels() {
        let g = HyperGrid {
            c_values: vec![1.0, 10.0],
            ..Default::default()
        };
        let labels: Vec<String> = g.cells(Family::LinearSvm).iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            ["C=1;loss=hinge", "C=1;loss=squared_hinge", "C=10;loss=hinge", "C=10;loss=squared_hinge"]
        );
        assert_eq!(g.cells(Family::KernelSvm)[1].label(), "C=1;kernel=rbf-scale");
        let bad = HyperGrid {
            c_values: vec![0.0],
            ..Default::default()
        };
        assert!(bad.validate(Family::Logreg).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 5usize..200, k in 2usize..6, seed in any::<u64>(), multilabel in any::<bool>()) {
            prop_assume!(n >= k);
            let y = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + seed as usize) % 3 == j) as u8 as f64);
            let task = if multilabel { TaskKind::Multilabel } else { TaskKind::Multiclass };
            let folds = kfold_indices(n, k, seed, y.view(), task).unwrap();
            let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all = folds.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
