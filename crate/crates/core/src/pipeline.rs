//! Run configuration and the stages behind the command line.
//!
//! A run is described by one TOML file plus a seed. Relative paths in the
//! file resolve against the file's directory. Every stage writes its
//! artifacts under `out_dir`; embeddings live in `cache_dir` and are
//! checkpointed while they are computed, so a rerun after a failure only
//! encodes what is missing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{read_cache, write_cache, EmbeddingMatrix};
use crate::encoder::{Encoder, EncoderId, EncoderSpec, InputSize, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::ingest::{
    impute_missing_labels, load_manifest, read_id_list, split, write_id_list, Dataset, LabelSchema, Sample, SplitMode,
    SplitSpec, TaskKind,
};
use crate::kernel::KernelSpec;
use crate::linear::{labels_from_scores, SvmLoss};
use crate::metrics::{full_report, Averaging, MetricsReport};
use crate::model::TrainedModel;
use crate::preprocess::{preprocess_sample, Normalization, PreprocessSpec, Preset};
use crate::report::{compare, emit_roc_points, roc_svg, BenchmarkTable, Comparison, RunRecord, RuntimeInfo};
use crate::select::{grid_search_with, train_cell, CellConfig, CvResult, Family, HyperGrid, SolverSettings};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: String,
    manifest: PathBuf,
    task: TaskKind,
    classes: Option<Vec<String>>,
    preset: Option<String>,
    #[serde(default)]
    seed: u64,
    cache_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    threads: usize,
    #[serde(default)]
    split: RawSplit,
    preprocess: Option<RawPreprocess>,
    encoder: RawEncoder,
    classifier: RawClassifier,
    #[serde(default)]
    report: RawReport,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train_fraction: Option<f64>,
    train_ids: Option<PathBuf>,
    test_ids: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPreprocess {
    resize_short_side: u32,
    center_crop: (u32, u32),
    normalization: Normalization,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawInput {
    Named(String),
    Fixed(usize, usize),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncoder {
    id: String,
    graph: PathBuf,
    input: Option<RawInput>,
    dim: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassifier {
    family: String,
    c_values: Option<Vec<f64>>,
    losses: Option<Vec<String>>,
    kernels: Option<Vec<String>>,
    folds: Option<usize>,
    averaging: Option<Averaging>,
    kernel_memory_gib: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReport {
    #[serde(default = "yes")]
    compare: bool,
    benchmarks: Option<PathBuf>,
    #[serde(default)]
    svg: bool,
}

impl Default for RawReport {
    fn default() -> Self {
        Self {
            compare: true,
            benchmarks: None,
            svg: false,
        }
    }
}

fn yes() -> bool {
    true
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    /// Encoder id, or a path to an `.onnx` graph.
    pub encoder: Option<String>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSource {
    Ratio(f64),
    Lists { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone)]
pub struct Config {
    pub dataset: String,
    pub manifest: PathBuf,
    pub schema: LabelSchema,
    pub preprocess: PreprocessSpec,
    pub seed: u64,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Worker threads for the parallel stages; 0 lets rayon decide.
    pub threads: usize,
    pub split: SplitSource,
    pub encoder: EncoderSpec,
    pub family: Family,
    pub grid: HyperGrid,
    pub folds: usize,
    pub averaging: Averaging,
    pub kernel_memory_bytes: Option<u64>,
    pub compare: bool,
    pub benchmarks: Option<PathBuf>,
    pub svg: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Class columns of a manifest header (everything after `id,image_path`).
fn header_classes(manifest: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| config_err(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let header = reader
        .headers()
        .map_err(|e| config_err(format!("manifest header: {e}")))?;
    Ok(header.iter().skip(2).map(|s| s.trim().to_string()).collect())
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &Overrides::default())
    }

    pub fn load_with(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base, ov)
    }

    /// Parse and validate. Paths are resolved against `base`; the manifest
    /// and encoder graph must exist.
    pub fn from_toml(text: &str, base: &Path, ov: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;

        let manifest = resolve(base, &raw.manifest);
        if !manifest.is_file() {
            return Err(config_err(format!("manifest {} does not exist", manifest.display())));
        }
        let classes = match raw.classes {
            Some(c) => c,
            None => header_classes(&manifest)?,
        };
        let schema = LabelSchema::new(raw.task, classes)?;

        let preset = ov.preset.clone().or(raw.preset);
        let preprocess = match (preset, raw.preprocess) {
            (Some(p), None) => p.parse::<Preset>()?.spec(),
            (Some(p), Some(_)) if ov.preset.is_some() => p.parse::<Preset>()?.spec(),
            (Some(_), Some(_)) => return Err(config_err("give either `preset` or a [preprocess] table, not both")),
            (None, Some(p)) => PreprocessSpec::new(p.resize_short_side, p.center_crop, p.normalization)?,
            (None, None) => return Err(config_err("no preprocessing: set `preset` or a [preprocess] table")),
        };

        let split = match (raw.split.train_fraction, raw.split.train_ids, raw.split.test_ids) {
            (f, None, None) => {
                let f = f.unwrap_or(DEFAULT_TRAIN_FRACTION);
                if !(f > 0.0 && f < 1.0) {
                    return Err(config_err(format!("train_fraction must lie in (0, 1), got {f}")));
                }
                SplitSource::Ratio(f)
            }
            (None, Some(tr), Some(te)) => SplitSource::Lists {
                train: resolve(base, &tr),
                test: resolve(base, &te),
            },
            _ => {
                return Err(config_err(
                    "[split] takes either train_fraction or both train_ids and test_ids",
                ))
            }
        };

        let encoder = encoder_spec(&raw.encoder, base, ov.encoder.as_deref())?;
        if !encoder.graph_path.is_file() {
            return Err(config_err(format!(
                "encoder graph {} does not exist",
                encoder.graph_path.display()
            )));
        }

        let family: Family = raw.classifier.family.parse()?;
        let mut grid = HyperGrid::default();
        if let Some(c) = raw.classifier.c_values {
            grid.c_values = c;
        }
        if let Some(l) = raw.classifier.losses {
            grid.losses = l.iter().map(|s| s.parse::<SvmLoss>()).collect::<Result<_>>()?;
        }
        if let Some(k) = raw.classifier.kernels {
            grid.kernels = k.iter().map(|s| s.parse::<KernelSpec>()).collect::<Result<_>>()?;
        }
        grid.validate(family)?;
        let folds = raw.classifier.folds.unwrap_or(crate::select::DEFAULT_FOLDS);
        if folds < 2 {
            return Err(config_err(format!("need at least 2 folds, got {folds}")));
        }
        let kernel_memory_bytes = match raw.classifier.kernel_memory_gib {
            Some(g) if g > 0.0 && g.is_finite() => Some((g * (1u64 << 30) as f64) as u64),
            Some(g) => return Err(config_err(format!("kernel_memory_gib must be positive, got {g}"))),
            None => None,
        };

        let dir = |o: &Option<PathBuf>, r: Option<PathBuf>, default: &str| match o {
            Some(p) => p.clone(),
            None => resolve(base, &r.unwrap_or_else(|| PathBuf::from(default))),
        };
        Ok(Config {
            dataset: raw.dataset,
            manifest,
            schema,
            preprocess,
            seed: ov.seed.unwrap_or(raw.seed),
            cache_dir: dir(&ov.cache_dir, raw.cache_dir, "cache"),
            out_dir: dir(&ov.out_dir, raw.out_dir, "out"),
            threads: raw.threads,
            split,
            encoder,
            family,
            grid,
            folds,
            averaging: raw.classifier.averaging.unwrap_or_default(),
            kernel_memory_bytes,
            compare: raw.report.compare,
            benchmarks: raw.report.benchmarks.map(|p| resolve(base, &p)),
            svg: raw.report.svg,
        })
    }

    pub fn solver_settings(&self) -> SolverSettings {
        let mut s = SolverSettings::with_seed(self.seed);
        if let Some(b) = self.kernel_memory_bytes {
            s.smo.memory_budget = b;
        }
        s
    }

    /// `<cache_dir>/<dataset>-<encoder>-<preprocess hash>.embd`
    pub fn cache_path(&self) -> PathBuf {
        let safe: String = self
            .dataset
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        self.cache_dir.join(format!(
            "{safe}-{}-{:016x}.embd",
            self.encoder.encoder_id,
            self.preprocess.hash64()
        ))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn encoder_spec(raw: &RawEncoder, base: &Path, over: Option<&str>) -> Result<EncoderSpec> {
    let configured_graph = resolve(base, &raw.graph);
    let (id, graph, same_as_file) = match over {
        Some(o) if o.ends_with(".onnx") || o.contains('/') => {
            let graph = PathBuf::from(o);
            let stem = graph.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            (stem.parse::<EncoderId>()?, graph, false)
        }
        Some(o) => {
            let id: EncoderId = o.parse()?;
            let dir = configured_graph.parent().map(Path::to_path_buf).unwrap_or_default();
            let same = id.as_str() == raw.id.parse::<EncoderId>()?.as_str();
            let graph = if same { configured_graph.clone() } else { dir.join(format!("{id}.onnx")) };
            (id, graph, same)
        }
        None => (raw.id.parse::<EncoderId>()?, configured_graph, true),
    };
    let mut spec = EncoderSpec::new(id, graph);
    // Geometry and width in the file describe the configured encoder only.
    if same_as_file {
        match &raw.input {
            Some(RawInput::Named(s)) if s.eq_ignore_ascii_case("dynamic") => spec.input_size = InputSize::Dynamic,
            Some(RawInput::Named(s)) => return Err(config_err(format!("encoder input {s:?}: use \"dynamic\" or [h, w]"))),
            Some(RawInput::Fixed(h, w)) => spec.input_size = InputSize::Fixed(*h, *w),
            None => {}
        }
        if raw.dim.is_some() {
            spec.embedding_dim = raw.dim;
        }
    }
    spec.batch_size = raw.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    if spec.batch_size == 0 {
        return Err(config_err("encoder batch_size must be positive"));
    }
    Ok(spec)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Train/test datasets after imputation and splitting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub imputed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub dataset: String,
    pub total: usize,
    pub train: usize,
    pub test: usize,
    pub imputed_labels: usize,
}

/// Load, impute and split; writes `train_ids.txt`, `test_ids.txt` and
/// `ingest.json`.
pub fn stage_ingest(cfg: &Config) -> Result<Prepared> {
    let run = || -> Result<Prepared> {
        let ds = load_manifest(&cfg.manifest, &cfg.schema)?;
        let (ds, imputed) = impute_missing_labels(&ds);
        if imputed.imputed > 0 {
            log::warn!("{} absent labels imputed as negative", imputed.imputed);
        }
        let mode = match &cfg.split {
            SplitSource::Ratio(f) => SplitMode::Ratio(*f),
            SplitSource::Lists { train, test } => SplitMode::ExplicitLists {
                train_ids: read_id_list(train)?,
                test_ids: read_id_list(test)?,
            },
        };
        let (train, test) = split(&ds, &SplitSpec { mode, seed: cfg.seed })?;
        ensure_dir(&cfg.out_dir)?;
        write_id_list(&cfg.artifact("train_ids.txt"), &train.ids())?;
        write_id_list(&cfg.artifact("test_ids.txt"), &test.ids())?;
        write_json(
            &cfg.artifact("ingest.json"),
            &IngestSummary {
                dataset: cfg.dataset.clone(),
                total: ds.len(),
                train: train.len(),
                test: test.len(),
                imputed_labels: imputed.imputed,
            },
        )?;
        Ok(Prepared {
            train,
            test,
            imputed: imputed.imputed,
        })
    };
    run().map_err(|e| e.in_stage("ingest"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedStats {
    pub cache_hits: usize,
    pub computed: usize,
    pub encoder_invocations: usize,
}

/// Embeddings for every train and test sample, plus counters.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub matrix: EmbeddingMatrix,
    pub stats: EmbedStats,
}

impl Embedded {
    pub fn features(&self, ds: &Dataset) -> Result<Array2<f64>> {
        self.matrix.features_for(&ds.ids())
    }
}

fn merge(existing: Option<EmbeddingMatrix>, new: Vec<crate::encoder::Embedding>, cfg: &Config, dim: usize) -> Result<EmbeddingMatrix> {
    let (mut ids, mut data) = match existing {
        Some(m) => (m.sample_ids, m.data),
        None => (Vec::new(), Vec::new()),
    };
    for e in new {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.vector.len(),
            });
        }
        ids.push(e.sample_id);
        data.extend_from_slice(&e.vector);
    }
    EmbeddingMatrix::new(dim, data, ids, cfg.encoder.encoder_id.as_str(), cfg.preprocess.hash64())
}

/// Samples per checkpoint: the cache is rewritten after each wave.
const WAVE_BATCHES: usize = 16;

/// Embed every sample of the split that is not already cached. The
/// encoder is loaded only when something is missing.
pub fn stage_embed(cfg: &Config, prepared: &Prepared) -> Result<Embedded> {
    let run = || -> Result<Embedded> {
        let path = cfg.cache_path();
        let existing = if path.exists() {
            let m = read_cache(&path)?;
            if m.encoder_id != cfg.encoder.encoder_id.as_str() || m.preprocess_hash != cfg.preprocess.hash64() {
                return Err(Error::Validation(format!(
                    "cache {} was written for encoder {} / preprocessing {:016x}",
                    path.display(),
                    m.encoder_id,
                    m.preprocess_hash
                )));
            }
            Some(m)
        } else {
            None
        };

        let samples: Vec<&Sample> = prepared.train.samples().iter().chain(prepared.test.samples()).collect();
        let missing: Vec<&Sample> = match &existing {
            Some(m) => {
                let index = m.index();
                samples.iter().copied().filter(|s| !index.contains_key(s.id.as_str())).collect()
            }
            None => samples.clone(),
        };
        let cache_hits = samples.len() - missing.len();
        if missing.is_empty() {
            let matrix = existing.ok_or(Error::Empty("dataset"))?;
            return Ok(Embedded {
                matrix,
                stats: EmbedStats {
                    cache_hits,
                    computed: 0,
                    encoder_invocations: 0,
                },
            });
        }

        let encoder = Encoder::load(cfg.encoder.clone())?;
        let dim = encoder.embedding_dim();
        if let Some(m) = &existing {
            if m.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: m.dim,
                    actual: dim,
                });
            }
        }
        ensure_dir(&cfg.cache_dir)?;
        let batch = cfg.encoder.batch_size;
        let wave = batch * WAVE_BATCHES * rayon::current_num_threads().max(1);
        let mut current = existing;
        for chunk in missing.chunks(wave) {
            let parts: Vec<Result<Vec<crate::encoder::Embedding>>> = chunk
                .par_chunks(batch)
                .map(|group| {
                    let tensors = group
                        .iter()
                        .map(|s| preprocess_sample(&s.id, s.image_ref.as_deref(), &cfg.preprocess))
                        .collect::<Result<Vec<_>>>()?;
                    encoder.embed_batch(&tensors)
                })
                .collect();
            let mut new = Vec::with_capacity(chunk.len());
            for p in parts {
                new.extend(p?);
            }
            let merged = merge(current.take(), new, cfg, dim)?;
            write_cache(&merged, &path)?;
            current = Some(merged);
        }
        Ok(Embedded {
            matrix: current.expect("at least one wave ran"),
            stats: EmbedStats {
                cache_hits,
                computed: missing.len(),
                encoder_invocations: encoder.invocations(),
            },
        })
    };
    run().map_err(|e| e.in_stage("embed"))
}

/// Grid search on the training split; writes `cv.csv`, `cv.json`,
/// `winner.json` and the refitted `model.bin`.
pub fn stage_gridsearch(cfg: &Config, prepared: &Prepared, emb: &Embedded) -> Result<(CvResult, TrainedModel)> {
    let run = || -> Result<(CvResult, TrainedModel)> {
        let x = emb.features(&prepared.train)?;
        let y = prepared.train.label_matrix()?;
        let out = grid_search_with(
            x.view(),
            y.view(),
            &cfg.schema,
            cfg.family,
            &cfg.grid,
            cfg.seed,
            cfg.folds,
            &cfg.solver_settings(),
        )?;
        ensure_dir(&cfg.out_dir)?;
        out.cv.write(&cfg.artifact("cv.csv"), &cfg.artifact("winner.json"))?;
        write_json(&cfg.artifact("cv.json"), &out.cv)?;
        out.model.save(&cfg.artifact("model.bin"))?;
        Ok((out.cv, out.model))
    };
    run().map_err(|e| e.in_stage("gridsearch"))
}

/// Fit one configuration on the whole training split; writes `model.bin`.
pub fn stage_train(cfg: &Config, prepared: &Prepared, emb: &Embedded, cell: &CellConfig) -> Result<TrainedModel> {
    let run = || -> Result<TrainedModel> {
        let x = emb.features(&prepared.train)?;
        let y = prepared.train.label_matrix()?;
        let model = train_cell(cell, x.view(), y.view(), &cfg.schema, &cfg.solver_settings())?;
        ensure_dir(&cfg.out_dir)?;
        model.save(&cfg.artifact("model.bin"))?;
        Ok(model)
    };
    run().map_err(|e| e.in_stage("train"))
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_".contains(c) { c } else { '_' })
        .collect()
}

/// Test-split metrics; writes `metrics.json`, `metrics.csv` and one ROC
/// point file per class with both positives and negatives
/// (`roc_<class>.csv`, plus `.svg` when enabled). Binary tasks get a
/// single curve for the positive class.
pub fn stage_evaluate(cfg: &Config, prepared: &Prepared, emb: &Embedded, model: &TrainedModel) -> Result<MetricsReport> {
    let run = || -> Result<MetricsReport> {
        let x = emb.features(&prepared.test)?;
        let y = prepared.test.label_matrix()?;
        let scores = model.predict_scores(x.view())?;
        let pred = labels_from_scores(&scores, cfg.schema.task());
        let report = full_report(
            y.view(),
            pred.view(),
            scores.scores.view(),
            cfg.schema.task(),
            cfg.schema.class_names(),
            cfg.averaging,
        )?;
        ensure_dir(&cfg.out_dir)?;
        write_json(&cfg.artifact("metrics.json"), &report)?;
        write_text(&cfg.artifact("metrics.csv"), &report.to_csv())?;

        let columns: Vec<usize> = if cfg.schema.task() == TaskKind::Binary {
            vec![1]
        } else {
            (0..cfg.schema.num_classes()).collect()
        };
        for k in columns {
            let labels: Vec<bool> = y.column(k).iter().map(|&v| v > 0.5).collect();
            if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
                continue;
            }
            let s: Vec<f64> = scores.scores.column(k).to_vec();
            let name = file_safe(&cfg.schema.class_names()[k]);
            let curve = emit_roc_points(&s, &labels, &cfg.artifact(&format!("roc_{name}.csv")))?;
            if cfg.svg {
                let title = format!("{} / {}", cfg.dataset, cfg.schema.class_names()[k]);
                write_text(&cfg.artifact(&format!("roc_{name}.svg")), &roc_svg(&curve, &title, curve.area()))?;
            }
        }
        Ok(report)
    };
    run().map_err(|e| e.in_stage("evaluate"))
}

/// Assemble the run record and, when enabled, the benchmark comparison
/// (`comparison.csv`). Writes `run_record.json`.
pub fn stage_report(
    cfg: &Config,
    prepared: &Prepared,
    cv: &CvResult,
    metrics: &MetricsReport,
    runtime: Option<RuntimeInfo>,
    canonical: bool,
) -> Result<RunRecord> {
    let run = || -> Result<RunRecord> {
        let benchmark: Option<Comparison> = if cfg.compare {
            let table = match &cfg.benchmarks {
                Some(p) => BenchmarkTable::load(p)?,
                None => BenchmarkTable::builtin(),
            };
            let c = compare(&cfg.dataset, metrics.auc, &table)?;
            write_text(&cfg.artifact("comparison.csv"), &c.to_csv())?;
            Some(c)
        } else {
            None
        };
        let w = cv.winner_cell();
        let record = RunRecord {
            dataset: cfg.dataset.clone(),
            encoder_id: cfg.encoder.encoder_id.to_string(),
            preprocess_hash: format!("{:016x}", cfg.preprocess.hash64()),
            family: cv.family.name().to_string(),
            winning_config: w.config,
            winning_label: w.config.label(),
            cv_mean_auc: w.mean,
            seed: cfg.seed,
            n_train: prepared.train.len(),
            n_test: prepared.test.len(),
            metrics: metrics.clone(),
            benchmark,
            runtime,
        };
        ensure_dir(&cfg.out_dir)?;
        write_text(&cfg.artifact("run_record.json"), &record.to_json(canonical))?;
        Ok(record)
    };
    run().map_err(|e| e.in_stage("report"))
}

/// Rebuild the report from the artifacts of earlier stages.
pub fn report_from_artifacts(cfg: &Config, prepared: &Prepared, canonical: bool) -> Result<RunRecord> {
    let load = || -> Result<(CvResult, MetricsReport)> {
        Ok((read_json(&cfg.artifact("cv.json"))?, read_json(&cfg.artifact("metrics.json"))?))
    };
    let (cv, metrics) = load().map_err(|e| e.in_stage("report"))?;
    stage_report(cfg, prepared, &cv, &metrics, None, canonical)
}

/// Thread pool sized by the config, used by every parallel stage.
pub fn with_pool<T: Send>(cfg: &Config, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// ingest → embed → grid search and refit → evaluate → report.
pub fn run_pipeline(cfg: &Config, canonical: bool) -> Result<RunRecord> {
    with_pool(cfg, || {
        let mut timings = std::collections::BTreeMap::new();
        let mut clock = Instant::now();
        let mut lap = |name: &str, timings: &mut std::collections::BTreeMap<String, f64>| {
            timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
            clock = Instant::now();
        };
        let prepared = stage_ingest(cfg)?;
        lap("ingest", &mut timings);
        let emb = stage_embed(cfg, &prepared)?;
        lap("embed", &mut timings);
        let (cv, model) = stage_gridsearch(cfg, &prepared, &emb)?;
        lap("gridsearch", &mut timings);
        let metrics = stage_evaluate(cfg, &prepared, &emb, &model)?;
        lap("evaluate", &mut timings);
        let runtime = RuntimeInfo {
            timings,
            encoder_invocations: emb.stats.encoder_invocations,
            cache_hits: emb.stats.cache_hits,
            embeddings_computed: emb.stats.computed,
        };
        stage_report(cfg, &prepared, &cv, &metrics, Some(runtime), canonical)
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onnx_graph;

    fn fixture(dir: &Path) {
        std::fs::write(dir.join("m.csv"), "id,image_path,neg,pos\na,,1,0\nb,,0,1\n").unwrap();
        onnx_graph::write(&onnx_graph::channel_mean_encoder(1, 8), &dir.join("stub.onnx")).unwrap();
    }

    const BASE: &str = r#"
dataset = "toy"
manifest = "m.csv"
task = "binary"
[preprocess]
resize_short_side = 1
center_crop = [1, 8]
normalization = "imagenet"
[encoder]
id = "stub"
graph = "stub.onnx"
input = [1, 8]
[classifier]
family = "logreg"
"#;

    #[test]
    fn parses_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let cfg = Config::from_toml(BASE, dir.path(), &Overrides::default()).unwrap();
        assert_eq!(cfg.schema.class_names(), ["neg", "pos"]);
        assert_eq!(cfg.encoder.input_size, InputSize::Fixed(1, 8));
        assert_eq!(cfg.split, SplitSource::Ratio(0.8));
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert!(cfg.compare);
        let name = cfg.cache_path().file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("toy-stub-") && name.ends_with(".embd"));
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ov = Overrides {
            preset: Some("ham10000".into()),
            seed: Some(9),
            out_dir: Some("/tmp/elsewhere".into()),
            ..Default::default()
        };
        let cfg = Config::from_toml(BASE, dir.path(), &ov).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.preprocess, Preset::Ham10000.spec());
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/elsewhere"));
    }

    #[test]
    fn missing_graph_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let text = BASE.replace("stub.onnx", "absent.onnx");
        let err = Config::from_toml(&text, dir.path(), &Overrides::default()).unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Config);
    }

    #[test]
    fn rejects_bad_grids_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        for bad in [
            BASE.replace("family = \"logreg\"", "family = \"forest\""),
            BASE.replace("family = \"logreg\"", "family = \"logreg\"\nc_values = []"),
            format!("{BASE}[split]\ntrain_fraction = 1.0\n"),
            BASE.replace("[preprocess]", "preset = \"odir\"\n[preprocess]"),
            BASE.replace("dataset", "datasett"),
        ] {
            assert!(Config::from_toml(&bad, dir.path(), &Overrides::default()).is_err(), "{bad}");
        }
    }
}
