//! Run records, benchmark comparison and ROC output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{roc_curve, MetricsReport, RocCurve};
use crate::select::CellConfig;

const BUILTIN_BENCHMARKS: &str = include_str!("../data/benchmarks.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub version: u32,
    pub auc: BTreeMap<String, f64>,
}

impl BenchmarkTable {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_BENCHMARKS).expect("bundled benchmark table is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: BenchmarkTable = toml::from_str(text).map_err(|e| Error::Config(format!("benchmark table: {e}")))?;
        if let Some((name, v)) = t.auc.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("benchmark AUC for {name} is {v}, outside [0, 1]")));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Case-insensitive lookup.
    pub fn get(&self, dataset: &str) -> Result<f64> {
        self.auc
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(dataset))
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownDataset(dataset.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub benchmark: f64,
    pub achieved: f64,
    pub delta: f64,
}

pub fn compare(dataset: &str, achieved: f64, table: &BenchmarkTable) -> Result<Comparison> {
    let benchmark = table.get(dataset)?;
    Ok(Comparison {
        dataset: dataset.to_string(),
        benchmark,
        achieved,
        delta: achieved - benchmark,
    })
}

pub fn compare_to_benchmark(record: &RunRecord, table: &BenchmarkTable) -> Result<Comparison> {
    compare(&record.dataset, record.metrics.auc, table)
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        format!(
            "dataset,benchmark_auc,achieved_auc,delta\n{},{},{},{}\n",
            self.dataset, self.benchmark, self.achieved, self.delta
        )
    }
}

/// Non-deterministic run facts, left out of canonical records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub encoder_invocations: usize,
    pub cache_hits: usize,
    pub embeddings_computed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub encoder_id: String,
    pub preprocess_hash: String,
    pub family: String,
    pub winning_config: CellConfig,
    pub winning_label: String,
    pub cv_mean_auc: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
    pub benchmark: Option<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime: Option<RuntimeInfo>,
}

impl RunRecord {
    /// Pretty JSON; `canonical` drops the runtime section so identical
    /// runs serialize byte-for-byte identically.
    pub fn to_json(&self, canonical: bool) -> String {
        let json = if canonical {
            let mut c = self.clone();
            c.runtime = None;
            serde_json::to_string_pretty(&c)
        } else {
            serde_json::to_string_pretty(self)
        };
        json.expect("run record serializes") + "\n"
    }
}

/// Write the ROC staircase for one binary scoring as `fpr,tpr,threshold`.
pub fn emit_roc_points(scores: &[f64], labels: &[bool], path: &Path) -> Result<RocCurve> {
    let curve = roc_curve(labels, scores)?;
    curve.write_csv(path)?;
    Ok(curve)
}

/// Minimal standalone SVG plot of a ROC curve.
pub fn roc_svg(curve: &RocCurve, title: &str, auc: f64) -> String {
    const SIZE: f64 = 360.0;
    const PAD: f64 = 40.0;
    let px = |f: f64| PAD + f * SIZE;
    let py = |t: f64| PAD + (1.0 - t) * SIZE;
    let points: Vec<String> = curve
        .fpr
        .iter()
        .zip(&curve.tpr)
        .map(|(&f, &t)| format!("{:.3},{:.3}", px(f), py(t)))
        .collect();
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let total = SIZE + 2.0 * PAD;
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">
<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="#444"/>
<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbb" stroke-dasharray="4 4"/>
<polyline fill="none" stroke="#1f5fa8" stroke-width="2" points="{pts}"/>
<text x="{PAD}" y="{ty}" font-family="sans-serif" font-size="13">{escaped} (AUC {auc:.4})</text>
<text x="{cx}" y="{by}" font-family="sans-serif" font-size="11" text-anchor="middle">false positive rate</text>
<text x="12" y="{cy}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 12 {cy})">true positive rate</text>
</svg>
"##,
        x0 = px(0.0),
        y0 = py(0.0),
        x1 = px(1.0),
        y1 = py(1.0),
        pts = points.join(" "),
        ty = PAD - 12.0,
        cx = PAD + SIZE / 2.0,
        by = total - 10.0,
        cy = PAD + SIZE / 2.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table_lookup() {
        let t = BenchmarkTable::builtin();
        assert_eq!(t.version, 1);
        assert_eq!(t.auc.len(), 5);
        assert_eq!(t.get("ham10000").unwrap(), 0.609);
        assert_eq!(t.get("CheXpert").unwrap(), 0.723);
        assert!(matches!(t.get("mnist"), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn deltas() {
        let t = BenchmarkTable::builtin();
        let c = compare("HAM10000", 0.9586, &t).unwrap();
        assert!((c.delta - 0.3496).abs() < 1e-12);
        assert_eq!(compare("CBIS-DDSM", 0.464, &t).unwrap().delta, 0.0);
        assert!((compare("PAD-UFES-20", 0.9145, &t).unwrap().delta - 0.4275).abs() < 1e-12);
    }

    #[test]
    fn custom_table_overrides() {
        let t = BenchmarkTable::from_toml("version = 2\n[auc]\nmine = 0.5\n").unwrap();
        assert_eq!(t.get("MINE").unwrap(), 0.5);
        assert!(BenchmarkTable::from_toml("version = 2\n[auc]\nbad = 1.5\n").is_err());
    }

    #[test]
    fn roc_points_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("roc.csv");
        let curve = emit_roc_points(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false], &p).unwrap();
        assert_eq!(curve.area(), 0.75);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
        assert!(text.trim_end().ends_with("1,1,0.1"));
        let svg = roc_svg(&curve, "a<b", 0.75);
        assert!(svg.contains("a&lt;b") && svg.contains("<polyline"));
    }
}
