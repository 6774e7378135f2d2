//! Dataset manifests, label schemas, missing-label imputation and
//! deterministic train/test splitting.
//!
//! A manifest is a UTF-8 CSV file with header
//! `id,image_path,<class_1>,...,<class_K>`. Label cells hold `0`, `1`,
//! an empty string (absent) or `-1` (an "uncertain" marker, treated as
//! absent). An empty `image_path` flags the image as missing.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

impl TaskKind {
    /// True when every row carries exactly one positive class.
    pub fn is_single_label(self) -> bool {
        !matches!(self, TaskKind::Multilabel)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "multiclass" => Ok(TaskKind::Multiclass),
            "multilabel" => Ok(TaskKind::Multilabel),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    task: TaskKind,
    class_names: Vec<String>,
}

impl LabelSchema {
    pub fn new(task: TaskKind, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Schema(format!(
                "at least two classes required, got {}",
                class_names.len()
            )));
        }
        if task == TaskKind::Binary && class_names.len() != 2 {
            return Err(Error::Schema(format!(
                "binary task needs exactly 2 classes, got {}",
                class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.trim().is_empty() {
                return Err(Error::Schema("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { task, class_names })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Number of one-vs-rest heads a classifier trains for this schema:
    /// one for binary tasks, one per class otherwise.
    pub fn num_heads(&self) -> usize {
        match self.task {
            TaskKind::Binary => 1,
            _ => self.class_names.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `None` marks a missing image.
    pub image_ref: Option<PathBuf>,
    /// `None` marks an absent label cell awaiting imputation.
    pub labels: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    schema: LabelSchema,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, schema: LabelSchema, samples: Vec<Sample>) -> Result<Self> {
        let k = schema.num_classes();
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {:?}", s.id)));
            }
            if s.labels.len() != k {
                return Err(Error::Validation(format!(
                    "sample {:?} has {} labels, schema has {k}",
                    s.id,
                    s.labels.len()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            schema,
            samples,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn absent_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.labels.iter().filter(|l| l.is_none()).count())
            .sum()
    }

    /// Dense n×K 0/1 label matrix. Fails if any label is still absent.
    pub fn label_matrix(&self) -> Result<Array2<f64>> {
        let k = self.schema.num_classes();
        let mut y = Array2::zeros((self.samples.len(), k));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, l) in s.labels.iter().enumerate() {
                y[[i, j]] = l.ok_or_else(|| {
                    Error::Validation(format!(
                        "sample {:?} label {:?} is absent; impute first",
                        s.id, self.schema.class_names[j]
                    ))
                })?;
            }
        }
        Ok(y)
    }

    fn subset(&self, name: String, keep: &[usize]) -> Dataset {
        Dataset {
            name,
            schema: self.schema.clone(),
            samples: keep.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    /// Random split; the value is the training fraction in (0, 1).
    Ratio(f64),
    ExplicitLists {
        train_ids: Vec<String>,
        test_ids: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitSpec {
    pub fn ratio(train_fraction: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::Ratio(train_fraction),
            seed,
        }
    }
}

fn parse_label_cell(raw: &str) -> std::result::Result<Option<f64>, String> {
    let cell = raw.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let value: f64 = cell
        .parse()
        .map_err(|_| format!("label cell {cell:?} is not 0, 1, -1 or empty"))?;
    if value == 1.0 {
        Ok(Some(1.0))
    } else if value == 0.0 {
        Ok(Some(0.0))
    } else if value == -1.0 {
        // uncertain marker
        Ok(None)
    } else {
        Err(format!("label cell {cell:?} is not 0, 1, -1 or empty"))
    }
}

/// Parse a manifest CSV against `schema`.
///
/// Relative image paths are resolved against the manifest's directory.
/// Absent label cells stay `None`; see [`impute_missing_labels`].
pub fn load_manifest(path: &Path, schema: &LabelSchema) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 2
        || header.get(0).map(str::trim) != Some("id")
        || header.get(1).map(str::trim) != Some("image_path")
    {
        return Err(parse_err(1, "header must start with `id,image_path`".into()));
    }

    let class_index: HashMap<&str, usize> = schema
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut column_to_class = Vec::with_capacity(header.len() - 2);
    let mut covered = vec![false; schema.num_classes()];
    for name in header.iter().skip(2) {
        let name = name.trim();
        let &idx = class_index
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown class {name:?} in manifest header")))?;
        if covered[idx] {
            return Err(Error::Schema(format!("class {name:?} appears twice in header")));
        }
        covered[idx] = true;
        column_to_class.push(idx);
    }
    if let Some(missing) = covered.iter().position(|c| !c) {
        return Err(Error::Schema(format!(
            "class {:?} missing from manifest header",
            schema.class_names()[missing]
        )));
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty sample id".into()));
        }
        let image_cell = record[1].trim();
        let image_ref = (!image_cell.is_empty()).then(|| base.join(image_cell));
        let mut labels = vec![None; schema.num_classes()];
        for (col, &class) in column_to_class.iter().enumerate() {
            labels[class] = parse_label_cell(&record[col + 2]).map_err(|m| parse_err(line, m))?;
        }
        if schema.task().is_single_label() {
            let positives = labels.iter().filter(|l| **l == Some(1.0)).count();
            if positives != 1 {
                return Err(parse_err(
                    line,
                    format!("sample {id:?}: single-label task needs exactly one positive class, found {positives}"),
                ));
            }
        }
        samples.push(Sample {
            id,
            image_ref,
            labels,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, schema.clone(), samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ImputeSummary {
    pub imputed: usize,
}

/// Replace every absent label with 0.
pub fn impute_missing_labels(ds: &Dataset) -> (Dataset, ImputeSummary) {
    let mut imputed = 0;
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            labels: s
                .labels
                .iter()
                .map(|l| {
                    Some(l.unwrap_or_else(|| {
                        imputed += 1;
                        0.0
                    }))
                })
                .collect(),
            ..s.clone()
        })
        .collect();
    let out = Dataset {
        name: ds.name.clone(),
        schema: ds.schema.clone(),
        samples,
    };
    (out, ImputeSummary { imputed })
}

/// Training-set size for a ratio split: `round(fraction * n)` with exact
/// halves rounded down.
pub fn train_size(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let lower = x.floor();
    // tolerance absorbs representation error such as 0.8 * 10015
    if x - lower <= 0.5 + 1e-9 {
        lower as usize
    } else {
        lower as usize + 1
    }
}

/// Partition `ds` into (train, test). Both halves keep manifest order.
///
/// Ratio mode shuffles sample indices with a Fisher–Yates pass driven by
/// SplitMix64 seeded with `spec.seed`, takes the first `train_size`
/// positions as the training set, and is therefore stable across runs and
/// platforms.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset"));
    }
    let n = ds.len();
    let mut in_train = vec![false; n];
    let mut in_test = vec![false; n];
    match &spec.mode {
        SplitMode::Ratio(fraction) => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::Validation(format!(
                    "train fraction {fraction} outside (0, 1)"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = SplitMix64::seed_from_u64(spec.seed);
            order.shuffle(&mut rng);
            let cut = train_size(n, *fraction);
            for (pos, &i) in order.iter().enumerate() {
                if pos < cut {
                    in_train[i] = true;
                } else {
                    in_test[i] = true;
                }
            }
        }
        SplitMode::ExplicitLists {
            train_ids,
            test_ids,
        } => {
            let index: HashMap<&str, usize> = ds
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.id.as_str(), i))
                .collect();
            for (ids, mark) in [(train_ids, &mut in_train), (test_ids, &mut in_test)] {
                for id in ids {
                    let &i = index
                        .get(id.as_str())
                        .ok_or_else(|| Error::Validation(format!("split list names unknown id {id:?}")))?;
                    mark[i] = true;
                }
            }
            if let Some(i) = (0..n).find(|&i| in_train[i] && in_test[i]) {
                return Err(Error::Validation(format!(
                    "id {:?} is in both train and test lists",
                    ds.samples[i].id
                )));
            }
            if let Some(i) = (0..n).find(|&i| !in_train[i] && !in_test[i]) {
                return Err(Error::Validation(format!(
                    "id {:?} is in neither split list",
                    ds.samples[i].id
                )));
            }
        }
    }
    let train: Vec<usize> = (0..n).filter(|&i| in_train[i]).collect();
    let test: Vec<usize> = (0..n).filter(|&i| in_test[i]).collect();
    Ok((
        ds.subset(format!("{}-train", ds.name), &train),
        ds.subset(format!("{}-test", ds.name), &test),
    ))
}

/// Read a split file: one id per line, blank lines ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_id_list(path: &Path, ids: &[&str]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn binary_schema() -> LabelSchema {
        LabelSchema::new(TaskKind::Binary, vec!["benign".into(), "malignant".into()]).unwrap()
    }

    fn manifest(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn toy(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                image_ref: None,
                labels: if i % 2 == 0 {
                    vec![Some(1.0), Some(0.0)]
                } else {
                    vec![Some(0.0), Some(1.0)]
                },
            })
            .collect();
        Dataset::new("toy", binary_schema(), samples).unwrap()
    }

    #[test]
    fn loads_three_row_binary_manifest() {
        let f = manifest("id,image_path,benign,malignant\na,a.png,1,0\nb,b.png,0,1\nc,,1,0\n");
        let ds = load_manifest(f.path(), &binary_schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.schema().num_classes(), 2);
        assert!(ds.samples()[2].image_ref.is_none());
        assert!(ds.samples()[0].image_ref.as_ref().unwrap().ends_with("a.png"));
    }

    #[test]
    fn header_columns_may_be_reordered() {
        let f = manifest("id,image_path,malignant,benign\na,a.png,1,0\n");
        let ds = load_manifest(f.path(), &binary_schema()).unwrap();
        assert_eq!(ds.samples()[0].labels, vec![Some(0.0), Some(1.0)]);
    }

    #[test]
    fn empty_and_uncertain_cells_are_absent() {
        let schema = LabelSchema::new(
            TaskKind::Multilabel,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
        )
        .unwrap();
        let f = manifest("id,image_path,a,b,c,d\nx,x.png,1,,-1,0\ny,y.png,1.0,0.0,-1.0,\n");
        let ds = load_manifest(f.path(), &schema).unwrap();
        assert_eq!(ds.samples()[0].labels, vec![Some(1.0), None, None, Some(0.0)]);
        assert_eq!(ds.samples()[1].labels, vec![Some(1.0), Some(0.0), None, None]);
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let f = manifest("id,image_path,benign,malignant\na,a.png,1,0\nb,b.png,0\n");
        match load_manifest(f.path(), &binary_schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_schema_error() {
        let f = manifest("id,image_path,benign,cancer\na,a.png,1,0\n");
        assert!(matches!(
            load_manifest(f.path(), &binary_schema()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn duplicate_id_is_named() {
        let f = manifest("id,image_path,benign,malignant\nimg7,a.png,1,0\nimg7,b.png,0,1\n");
        let err = load_manifest(f.path(), &binary_schema()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("img7"));
    }

    #[test]
    fn single_label_rows_need_one_positive() {
        let f = manifest("id,image_path,benign,malignant\na,a.png,1,1\n");
        assert!(matches!(
            load_manifest(f.path(), &binary_schema()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn schema_invariants() {
        assert!(LabelSchema::new(TaskKind::Binary, vec!["a".into()]).is_err());
        assert!(LabelSchema::new(TaskKind::Binary, vec!["a".into(), "b".into(), "c".into()]).is_err());
        assert!(LabelSchema::new(TaskKind::Multiclass, vec!["a".into(), "a".into()]).is_err());
        assert!(LabelSchema::new(TaskKind::Multiclass, vec!["a".into(), " ".into()]).is_err());
    }

    #[test]
    fn imputation_sets_absent_to_zero() {
        let schema = LabelSchema::new(
            TaskKind::Multilabel,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
        )
        .unwrap();
        let ds = Dataset::new(
            "m",
            schema,
            vec![
                Sample {
                    id: "x".into(),
                    image_ref: None,
                    labels: vec![Some(1.0), None, None, Some(0.0)],
                },
                Sample {
                    id: "y".into(),
                    image_ref: None,
                    labels: vec![None; 4],
                },
            ],
        )
        .unwrap();
        let (out, summary) = impute_missing_labels(&ds);
        assert_eq!(summary.imputed, 6);
        assert_eq!(out.samples()[0].labels, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        assert_eq!(out.samples()[1].labels, vec![Some(0.0); 4]);
        let (again, s2) = impute_missing_labels(&out);
        assert_eq!(again, out);
        assert_eq!(s2.imputed, 0);
    }

    #[test]
    fn train_size_rounding() {
        assert_eq!(train_size(10, 0.8), 8);
        assert_eq!(train_size(10015, 0.8), 8012);
        assert_eq!(train_size(5, 0.5), 2);
        assert_eq!(train_size(7, 0.5), 3);
        assert_eq!(train_size(3, 0.9), 3);
    }

    #[test]
    fn ratio_split_sizes_and_determinism() {
        let ds = toy(10);
        let (tr, te) = split(&ds, &SplitSpec::ratio(0.8, 7)).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, te2) = split(&ds, &SplitSpec::ratio(0.8, 7)).unwrap();
        assert_eq!(tr.ids(), tr2.ids());
        assert_eq!(te.ids(), te2.ids());
    }

    #[test]
    fn ratio_split_matches_published_row_counts() {
        let ds = toy(10015);
        let (tr, te) = split(&ds, &SplitSpec::ratio(0.8, 0)).unwrap();
        assert_eq!((tr.len(), te.len()), (8012, 2003));
    }

    #[test]
    fn explicit_split() {
        let ds = toy(4);
        let spec = SplitSpec {
            mode: SplitMode::ExplicitLists {
                train_ids: vec!["s0".into(), "s2".into(), "s3".into()],
                test_ids: vec!["s1".into()],
            },
            seed: 0,
        };
        let (tr, te) = split(&ds, &spec).unwrap();
        assert_eq!(tr.ids(), vec!["s0", "s2", "s3"]);
        assert_eq!(te.ids(), vec!["s1"]);

        let bad = SplitSpec {
            mode: SplitMode::ExplicitLists {
                train_ids: vec!["s0".into(), "nope".into()],
                test_ids: vec![],
            },
            seed: 0,
        };
        assert!(matches!(split(&ds, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn id_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        write_id_list(&p, &["a", "b"]).unwrap();
        assert_eq!(read_id_list(&p).unwrap(), vec!["a", "b"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions_ids(n in 1usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
                let ds = toy(n);
                let (tr, te) = split(&ds, &SplitSpec::ratio(frac, seed)).unwrap();
                prop_assert_eq!(tr.len(), train_size(n, frac));
                let mut all: Vec<&str> = tr.ids().into_iter().chain(te.ids()).collect();
                let total = all.len();
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), total);
                prop_assert_eq!(total, n);
            }
        }
    }
}
