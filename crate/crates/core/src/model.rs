//! Trained-model envelope and its binary serialization.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                                              |
//! |--------|------|----------------------------------------------------|
//! | 0      | 4    | magic `MEMD`                                       |
//! | 4      | 2    | u16 format version (1)                             |
//! | 6      | 1    | u8 kind (see [`KIND_CODES`])                       |
//! | 7      | 4    | u32 header length `h`                              |
//! | 11     | h    | UTF-8 JSON header: schema, hyperparameters, shapes |
//! | 11+h   | 8·p  | f64 payload                                        |
//! | end−8  | 8    | u64 XXH64 (seed 0) of all preceding bytes          |
//!
//! Linear payload: weights `K'×d` row-major, then intercepts `K'`.
//! Kernel payload: support vectors `s×d`, dual coefficients `K'×s`, then
//! intercepts `K'`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};
use crate::ingest::LabelSchema;
use crate::kernel::{kernel_predict, KernelModel, ResolvedKernel};
use crate::linear::{predict_scores, LinearHyper, LinearKind, LinearModel, ScoreMatrix};

pub const MAGIC: [u8; 4] = *b"MEMD";
pub const VERSION: u16 = 1;

/// Kind byte values.
pub const KIND_CODES: [(u8, &str); 5] = [
    (0, "logreg-binary"),
    (1, "logreg-multinomial"),
    (2, "logreg-ovr"),
    (3, "linear-svm"),
    (4, "kernel-svm"),
];

const PREFIX_LEN: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Linear(LinearModel),
    Kernel(KernelModel),
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: LabelSchema,
    c: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    linear: Option<LinearHyper>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kernel: Option<ResolvedKernel>,
    heads: usize,
    dim: usize,
    support_vectors: usize,
}

impl TrainedModel {
    pub fn schema(&self) -> &LabelSchema {
        match self {
            TrainedModel::Linear(m) => &m.schema,
            TrainedModel::Kernel(m) => &m.schema,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrainedModel::Linear(m) => m.dim(),
            TrainedModel::Kernel(m) => m.dim(),
        }
    }

    pub fn predict_scores(&self, x: ArrayView2<f64>) -> Result<ScoreMatrix> {
        match self {
            TrainedModel::Linear(m) => predict_scores(m, x),
            TrainedModel::Kernel(m) => kernel_predict(m, x),
        }
    }

    fn kind_code(&self) -> u8 {
        match self {
            TrainedModel::Linear(m) => match m.kind {
                LinearKind::LogRegBinary => 0,
                LinearKind::LogRegMultinomial => 1,
                LinearKind::LogRegOvR => 2,
                LinearKind::LinearSvm => 3,
            },
            TrainedModel::Kernel(_) => 4,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, payload): (Header, Vec<f64>) = match self {
            TrainedModel::Linear(m) => {
                let mut p: Vec<f64> = m.weights.iter().copied().collect();
                p.extend(m.intercepts.iter());
                let h = Header {
                    schema: m.schema.clone(),
                    c: m.hyper.c,
                    linear: Some(m.hyper),
                    kernel: None,
                    heads: m.weights.nrows(),
                    dim: m.weights.ncols(),
                    support_vectors: 0,
                };
                (h, p)
            }
            TrainedModel::Kernel(m) => {
                let mut p: Vec<f64> = m.support_vectors.iter().copied().collect();
                p.extend(m.dual_coefs.iter());
                p.extend(m.intercepts.iter());
                let h = Header {
                    schema: m.schema.clone(),
                    c: m.c,
                    linear: None,
                    kernel: Some(m.kernel),
                    heads: m.dual_coefs.nrows(),
                    dim: m.support_vectors.ncols(),
                    support_vectors: m.support_vectors.nrows(),
                };
                (h, p)
            }
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * payload.len() + 8);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind_code());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = XxHash64::oneshot(0, &buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        if bytes.len() < PREFIX_LEN + 8 {
            return Err(bad(format!("file truncated to {} bytes", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported model version {version}")));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if stored != XxHash64::oneshot(0, &bytes[..body_end]) {
            return Err(bad("checksum mismatch".into()));
        }
        let kind = bytes[6];
        let h_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        if PREFIX_LEN + h_len > body_end {
            return Err(bad("header length exceeds file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + h_len])
            .map_err(|e| bad(format!("header: {e}")))?;
        let payload: Vec<f64> = bytes[PREFIX_LEN + h_len..body_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (k, d, s) = (header.heads, header.dim, header.support_vectors);
        let expect_len = if kind == 4 { s * d + k * s + k } else { k * d + k };
        if payload.len() != expect_len || (body_end - PREFIX_LEN - h_len) % 8 != 0 {
            return Err(bad(format!("payload holds {} values, expected {expect_len}", payload.len())));
        }
        let shape_err = |e: ndarray::ShapeError| bad(e.to_string());
        if kind == 4 {
            let kernel = header.kernel.ok_or_else(|| bad("kernel parameters missing".into()))?;
            let support_vectors = Array2::from_shape_vec((s, d), payload[..s * d].to_vec()).map_err(shape_err)?;
            let dual_coefs =
                Array2::from_shape_vec((k, s), payload[s * d..s * d + k * s].to_vec()).map_err(shape_err)?;
            let intercepts = Array1::from(payload[s * d + k * s..].to_vec());
            return Ok(TrainedModel::Kernel(KernelModel {
                support_vectors,
                dual_coefs,
                intercepts,
                kernel,
                c: header.c,
                schema: header.schema,
            }));
        }
        let kind = match kind {
            0 => LinearKind::LogRegBinary,
            1 => LinearKind::LogRegMultinomial,
            2 => LinearKind::LogRegOvR,
            3 => LinearKind::LinearSvm,
            other => return Err(bad(format!("unknown model kind {other}"))),
        };
        let hyper = header.linear.ok_or_else(|| bad("linear hyperparameters missing".into()))?;
        let weights = Array2::from_shape_vec((k, d), payload[..k * d].to_vec()).map_err(shape_err)?;
        let intercepts = Array1::from(payload[k * d..].to_vec());
        Ok(TrainedModel::Linear(LinearModel {
            kind,
            weights,
            intercepts,
            hyper,
            schema: header.schema,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TaskKind;
    use crate::kernel::{GammaMode, KernelSpec};
    use crate::linear::SvmLoss;
    use ndarray::array;

    fn models() -> Vec<TrainedModel> {
        let schema = LabelSchema::new(TaskKind::Multiclass, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        vec![
            TrainedModel::Linear(LinearModel {
                kind: LinearKind::LinearSvm,
                weights: array![[1.0, -2.5], [0.1, 1e-300], [f64::MIN_POSITIVE, 3.0]],
                intercepts: array![0.5, -0.25, 7.0],
                hyper: LinearHyper {
                    c: 10.0,
                    loss: Some(SvmLoss::SquaredHinge),
                },
                schema: schema.clone(),
            }),
            TrainedModel::Kernel(KernelModel {
                support_vectors: array![[1.0, 2.0], [3.0, 4.0]],
                dual_coefs: array![[0.5, -0.5], [0.0, 1.0], [-1.0, 0.0]],
                intercepts: array![0.1, 0.2, 0.3],
                kernel: ResolvedKernel {
                    spec: KernelSpec::rbf(GammaMode::Scale),
                    gamma: 0.123,
                },
                c: 1.0,
                schema,
            }),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        for m in models() {
            let bytes = m.to_bytes();
            assert_eq!(TrainedModel::from_bytes(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn corruption_is_detected() {
        for m in models() {
            let mut bytes = m.to_bytes();
            let n = bytes.len();
            assert!(TrainedModel::from_bytes(&bytes[..n - 3]).is_err());
            bytes[n / 2] ^= 1;
            assert!(matches!(TrainedModel::from_bytes(&bytes), Err(Error::ModelFormat(_))));
        }
        assert!(TrainedModel::from_bytes(b"EMBD\x01\x00........").is_err());
    }
}
