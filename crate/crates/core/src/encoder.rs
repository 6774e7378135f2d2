//! Frozen image encoders loaded from ONNX graphs.
//!
//! A graph must have a single float input `pixel_values` (N×3×H×W) and a
//! single output `embedding` (N×d). Loading probes the graph once to read
//! `d`; a width of 1000 is taken as an ImageNet head that was not removed.
//!
//! An optional sidecar `<stem>.manifest.json` next to the graph records
//! the exporter's view (encoder id, opset, input geometry, output width,
//! SHA-256 of the graph). When present every field is checked and a
//! mismatch refuses the graph.
//!
//! Parallelism is inter-batch only: an [`Encoder`] is `Send + Sync` and
//! concurrent [`Encoder::embed_batch`] calls run independently, while each
//! call runs its batches sequentially on the calling thread. Optimized
//! plans are cached per input shape.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use prost::Message;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::pb;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::{resize_tensor, ImageTensor, CHANNELS};

pub const INPUT_NAME: &str = "pixel_values";
pub const OUTPUT_NAME: &str = "embedding";
/// Minimum spatial size accepted by dynamic-input graphs.
pub const MIN_DYNAMIC_SIZE: usize = 32;
pub const DEFAULT_BATCH_SIZE: usize = 32;
const IMAGENET_HEAD_WIDTH: usize = 1000;
const MIN_OPSET: i64 = 13;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EncoderId {
    ResNet50Penultimate,
    ClipVitB32Visual,
    /// Any other graph honouring the interface (e.g. stub encoders).
    Custom(String),
}

impl EncoderId {
    pub fn as_str(&self) -> &str {
        match self {
            EncoderId::ResNet50Penultimate => "resnet50-penultimate",
            EncoderId::ClipVitB32Visual => "clip-vit-b32",
            EncoderId::Custom(s) => s,
        }
    }

    pub fn default_input(&self) -> Option<InputSize> {
        match self {
            EncoderId::ResNet50Penultimate => Some(InputSize::Dynamic),
            EncoderId::ClipVitB32Visual => Some(InputSize::Fixed(224, 224)),
            EncoderId::Custom(_) => None,
        }
    }

    pub fn default_dim(&self) -> Option<usize> {
        match self {
            EncoderId::ResNet50Penultimate => Some(2048),
            EncoderId::ClipVitB32Visual => Some(512),
            EncoderId::Custom(_) => None,
        }
    }
}

impl std::fmt::Display for EncoderId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EncoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::Config(format!("invalid encoder id {s:?}")));
        }
        Ok(match id {
            "resnet50-penultimate" | "resnet50" => EncoderId::ResNet50Penultimate,
            "clip-vit-b32" | "clip" => EncoderId::ClipVitB32Visual,
            other => EncoderId::Custom(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSize {
    Fixed(usize, usize),
    /// Any H, W ≥ [`MIN_DYNAMIC_SIZE`].
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub encoder_id: EncoderId,
    pub graph_path: PathBuf,
    pub input_size: InputSize,
    /// Declared width; checked against the graph when set.
    pub embedding_dim: Option<usize>,
    pub batch_size: usize,
}

impl EncoderSpec {
    /// Spec with the id's standard geometry and width. Custom ids default
    /// to dynamic input and an undeclared width.
    pub fn new(encoder_id: EncoderId, graph_path: impl Into<PathBuf>) -> Self {
        Self {
            input_size: encoder_id.default_input().unwrap_or(InputSize::Dynamic),
            embedding_dim: encoder_id.default_dim(),
            encoder_id,
            graph_path: graph_path.into(),
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: String,
    pub vector: Vec<f32>,
}

/// Sidecar written by the exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub encoder_id: String,
    pub source_checkpoint: String,
    pub opset: i64,
    pub input: ManifestInput,
    pub output_dim: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestInput {
    Dynamic(String),
    Fixed { height: usize, width: usize },
}

/// `<dir>/<stem>.manifest.json` for a graph at `<dir>/<stem>.onnx`.
pub fn manifest_path(graph: &Path) -> PathBuf {
    let stem = graph.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    graph.with_file_name(format!("{stem}.manifest.json"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

type Plan = Arc<TypedRunnableModel>;

pub struct Encoder {
    spec: EncoderSpec,
    model: InferenceModel,
    dim: usize,
    plans: Mutex<HashMap<(usize, usize, usize), Plan>>,
    invocations: AtomicUsize,
    manifest: Option<ExportManifest>,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("spec", &self.spec)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

fn enc_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Encoder(format!("{}: {e}", path.display()))
}

fn check_interface(proto: &pb::ModelProto, path: &Path) -> Result<i64> {
    let opset = proto
        .opset_import
        .iter()
        .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
        .map(|o| o.version)
        .unwrap_or(0);
    if opset < MIN_OPSET {
        return Err(enc_err(path, format!("opset {opset} is below the required {MIN_OPSET}")));
    }
    let graph = proto.graph.as_ref().ok_or_else(|| enc_err(path, "model has no graph"))?;
    let initializers: Vec<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
    let inputs: Vec<&str> = graph
        .input
        .iter()
        .map(|v| v.name.as_str())
        .filter(|n| !initializers.contains(n))
        .collect();
    if inputs != [INPUT_NAME] {
        return Err(enc_err(
            path,
            format!("graph must have exactly one input named {INPUT_NAME:?}, found {inputs:?}"),
        ));
    }
    let outputs: Vec<&str> = graph.output.iter().map(|v| v.name.as_str()).collect();
    if outputs != [OUTPUT_NAME] {
        return Err(enc_err(
            path,
            format!("graph must have exactly one output named {OUTPUT_NAME:?}, found {outputs:?}"),
        ));
    }
    Ok(opset)
}

impl Encoder {
    pub fn load(spec: EncoderSpec) -> Result<Self> {
        let path = spec.graph_path.clone();
        if spec.batch_size == 0 {
            return Err(Error::Config("encoder batch size must be positive".into()));
        }
        if let (EncoderId::ClipVitB32Visual, InputSize::Dynamic) = (&spec.encoder_id, spec.input_size) {
            return Err(Error::Config("clip-vit-b32 requires a fixed 224×224 input".into()));
        }
        if !path.is_file() {
            return Err(enc_err(&path, "encoder graph not found"));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let proto = pb::ModelProto::decode(bytes.as_slice()).map_err(|e| enc_err(&path, format!("not an ONNX model: {e}")))?;
        let opset = check_interface(&proto, &path)?;
        let model = tract_onnx::onnx()
            .model_for_proto_model(&proto)
            .map_err(|e| enc_err(&path, format!("{e:#}")))?;

        let mut enc = Encoder {
            spec,
            model,
            dim: 0,
            plans: Mutex::new(HashMap::new()),
            invocations: AtomicUsize::new(0),
            manifest: None,
        };
        let (h, w) = match enc.spec.input_size {
            InputSize::Fixed(h, w) => (h, w),
            InputSize::Dynamic => (224, 224),
        };
        let probe = enc
            .run_plan(1, h, w, vec![0.0; CHANNELS * h * w])
            .map_err(|e| enc_err(&path, format!("probe run failed: {e}")))?;
        let shape = probe.shape().to_vec();
        if shape.len() != 2 {
            return Err(enc_err(
                &path,
                format!("output {OUTPUT_NAME:?} has shape {shape:?}; expected N×d (rank 2). Re-export the penultimate features"),
            ));
        }
        let dim = shape[1];
        if dim == IMAGENET_HEAD_WIDTH {
            return Err(enc_err(
                &path,
                "output width is 1000: the classification head is still attached. Re-export with the final classification layer removed",
            ));
        }
        if let Some(declared) = enc.spec.embedding_dim {
            if declared != dim {
                return Err(enc_err(
                    &path,
                    format!("graph emits width {dim} but {} declares {declared}; re-export the graph", enc.spec.encoder_id),
                ));
            }
        }
        enc.dim = dim;
        enc.manifest = enc.verify_manifest(&bytes, opset)?;
        Ok(enc)
    }

    fn verify_manifest(&self, graph_bytes: &[u8], opset: i64) -> Result<Option<ExportManifest>> {
        let path = manifest_path(&self.spec.graph_path);
        if !path.is_file() {
            if !matches!(self.spec.encoder_id, EncoderId::Custom(_)) {
                log::warn!("no export manifest at {}; graph provenance unchecked", path.display());
            }
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ExportManifest = serde_json::from_str(&text).map_err(|e| enc_err(&path, format!("bad manifest: {e}")))?;
        let refuse = |what: String| Err(enc_err(&path, format!("refusing mismatched graph: {what}")));
        let actual_hash = sha256_hex(graph_bytes);
        if !m.sha256.eq_ignore_ascii_case(&actual_hash) {
            return refuse(format!("sha256 {actual_hash} does not match manifest {}", m.sha256));
        }
        if m.encoder_id != self.spec.encoder_id.as_str() {
            return refuse(format!("manifest names encoder {:?}, expected {:?}", m.encoder_id, self.spec.encoder_id.as_str()));
        }
        if m.output_dim != self.dim {
            return refuse(format!("manifest output_dim {} but graph emits {}", m.output_dim, self.dim));
        }
        if m.opset != opset {
            return refuse(format!("manifest opset {} but graph imports {opset}", m.opset));
        }
        let input_ok = match (&m.input, self.spec.input_size) {
            (ManifestInput::Dynamic(s), InputSize::Dynamic) => s == "dynamic",
            (ManifestInput::Fixed { height, width }, InputSize::Fixed(h, w)) => (*height, *width) == (h, w),
            _ => false,
        };
        if !input_ok {
            return refuse(format!("manifest input {:?} but spec expects {:?}", m.input, self.spec.input_size));
        }
        Ok(Some(m))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn manifest(&self) -> Option<&ExportManifest> {
        self.manifest.as_ref()
    }

    /// Number of graph executions since load, excluding the load probe.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    fn plan(&self, n: usize, h: usize, w: usize) -> Result<Plan> {
        if let Some(p) = self.plans.lock().unwrap().get(&(n, h, w)) {
            return Ok(p.clone());
        }
        let fact = InferenceFact::dt_shape(f32::datum_type(), tvec![n, CHANNELS, h, w]);
        let plan = self
            .model
            .clone()
            .with_input_fact(0, fact)
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| Error::Encoder(format!("cannot build plan for {n}×3×{h}×{w}: {e:#}")))?;
        self.plans.lock().unwrap().insert((n, h, w), plan.clone());
        Ok(plan)
    }

    fn run_plan(&self, n: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Tensor> {
        let plan = self.plan(n, h, w)?;
        let input = tract_ndarray::Array4::from_shape_vec((n, CHANNELS, h, w), data)
            .map_err(|e| Error::Encoder(e.to_string()))?;
        let mut out = plan
            .run(tvec![Tensor::from(input).into()])
            .map_err(|e| Error::Encoder(format!("inference failed: {e:#}")))?;
        let t = out.remove(0).into_tensor();
        t.cast_to::<f32>()
            .map(|c| c.into_owned())
            .map_err(|e| Error::Encoder(e.to_string()))
    }

    /// Bring a tensor to the graph's geometry: fixed-size graphs resize
    /// larger inputs bilinearly and reject smaller ones; dynamic graphs
    /// accept any size from [`MIN_DYNAMIC_SIZE`].
    fn adapt(&self, t: &ImageTensor) -> Result<ImageTensor> {
        match self.spec.input_size {
            InputSize::Fixed(h, w) => {
                if (t.height, t.width) == (h, w) {
                    Ok(t.clone())
                } else if t.height >= h && t.width >= w {
                    Ok(resize_tensor(t, h, w))
                } else {
                    Err(Error::Encoder(format!(
                        "sample {}: tensor {}×{} is smaller than the {h}×{w} input of {}",
                        t.sample_id, t.height, t.width, self.spec.encoder_id
                    )))
                }
            }
            InputSize::Dynamic => {
                if t.height < MIN_DYNAMIC_SIZE || t.width < MIN_DYNAMIC_SIZE {
                    Err(Error::Encoder(format!(
                        "sample {}: tensor {}×{} is below the {MIN_DYNAMIC_SIZE}-pixel minimum",
                        t.sample_id, t.height, t.width
                    )))
                } else {
                    Ok(t.clone())
                }
            }
        }
    }

    /// One embedding per tensor, in input order.
    pub fn embed_batch(&self, tensors: &[ImageTensor]) -> Result<Vec<Embedding>> {
        for t in tensors {
            if t.data.len() != CHANNELS * t.height * t.width {
                return Err(Error::Encoder(format!("sample {}: tensor data does not match its shape", t.sample_id)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(t.sample_id.clone()));
            }
        }
        let adapted = tensors.iter().map(|t| self.adapt(t)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(adapted.len());
        let mut start = 0;
        while start < adapted.len() {
            let (h, w) = (adapted[start].height, adapted[start].width);
            let mut end = start + 1;
            while end < adapted.len() && end - start < self.spec.batch_size && (adapted[end].height, adapted[end].width) == (h, w) {
                end += 1;
            }
            let chunk = &adapted[start..end];
            let n = chunk.len();
            let mut data = Vec::with_capacity(n * CHANNELS * h * w);
            for t in chunk {
                data.extend_from_slice(&t.data);
            }
            let result = self.run_plan(n, h, w, data)?;
            self.invocations.fetch_add(1, Ordering::Relaxed);
            let view = result
                .to_plain_array_view::<f32>()
                .map_err(|e| Error::Encoder(e.to_string()))?;
            if view.shape() != [n, self.dim] {
                return Err(Error::Encoder(format!(
                    "graph returned shape {:?}, expected [{n}, {}]",
                    view.shape(),
                    self.dim
                )));
            }
            for (i, t) in chunk.iter().enumerate() {
                let vector: Vec<f32> = view.index_axis(tract_ndarray::Axis(0), i).iter().copied().collect();
                if !vector.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(t.sample_id.clone()));
                }
                out.push(Embedding {
                    sample_id: t.sample_id.clone(),
                    vector,
                });
            }
            start = end;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onnx_graph;

    fn tensor(id: &str, h: usize, w: usize, f: impl Fn(usize) -> f32) -> ImageTensor {
        let mut t = ImageTensor::zeros(id, h, w, 0);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    fn stub(dir: &Path, name: &str, m: &pb::ModelProto) -> PathBuf {
        let p = dir.join(format!("{name}.onnx"));
        onnx_graph::write(m, &p).unwrap();
        p
    }

    #[test]
    fn ids_parse_and_print() {
        assert_eq!("clip-vit-b32".parse::<EncoderId>().unwrap(), EncoderId::ClipVitB32Visual);
        assert_eq!("resnet50-penultimate".parse::<EncoderId>().unwrap().to_string(), "resnet50-penultimate");
        assert_eq!("stub".parse::<EncoderId>().unwrap(), EncoderId::Custom("stub".into()));
        assert!("a b".parse::<EncoderId>().is_err());
    }

    #[test]
    fn channel_mean_stub_is_identity_on_grey_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = stub(dir.path(), "stub", &onnx_graph::channel_mean_encoder(1, 8));
        let mut spec = EncoderSpec::new(EncoderId::Custom("stub".into()), &p);
        spec.input_size = InputSize::Fixed(1, 8);
        let enc = Encoder::load(spec).unwrap();
        assert_eq!(enc.embedding_dim(), 8);
        assert_eq!(enc.invocations(), 0);
        let t = tensor("a", 1, 8, |i| (i % 8) as f32);
        let e = enc.embed_batch(&[t.clone(), t.clone(), t]).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].vector, (0..8).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(e[0], e[2]);
        assert_eq!(enc.invocations(), 1);
    }

    #[test]
    fn dynamic_graph_and_batch_invariance() {
        let dir = tempfile::tempdir().unwrap();
        let p = stub(dir.path(), "pool", &onnx_graph::pooled_projection_encoder(16, None));
        let enc = Encoder::load(EncoderSpec::new(EncoderId::Custom("pool".into()), &p)).unwrap();
        assert_eq!(enc.embedding_dim(), 16);
        let batch: Vec<ImageTensor> = (0..5)
            .map(|k| tensor(&format!("s{k}"), 40, 48, move |i| ((i * 31 + k * 7) % 97) as f32 / 97.0 - 0.5))
            .collect();
        let all = enc.embed_batch(&batch).unwrap();
        for (t, e) in batch.iter().zip(&all) {
            let single = enc.embed_batch(std::slice::from_ref(t)).unwrap();
            assert_eq!(single[0].sample_id, e.sample_id);
            for (a, b) in single[0].vector.iter().zip(&e.vector) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
        let big = tensor("big", 64, 64, |_| 0.25);
        assert_eq!(enc.embed_batch(&[big]).unwrap()[0].vector.len(), 16);
        let small = tensor("tiny", 16, 64, |_| 0.0);
        assert!(matches!(enc.embed_batch(&[small]), Err(Error::Encoder(_))));
    }

    #[test]
    fn non_finite_input_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = stub(dir.path(), "stub", &onnx_graph::channel_mean_encoder(1, 8));
        let mut spec = EncoderSpec::new(EncoderId::Custom("stub".into()), &p);
        spec.input_size = InputSize::Fixed(1, 8);
        let enc = Encoder::load(spec).unwrap();
        let bad = tensor("img42", 1, 8, |i| if i == 3 { f32::NAN } else { 0.0 });
        match enc.embed_batch(&[bad]) {
            Err(Error::NonFinite(id)) => assert_eq!(id, "img42"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_graphs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = EncoderSpec::new(EncoderId::Custom("x".into()), dir.path().join("none.onnx"));
        assert!(matches!(Encoder::load(missing), Err(Error::Encoder(_))));

        let head = stub(dir.path(), "head", &onnx_graph::pooled_projection_encoder(1000, None));
        let err = Encoder::load(EncoderSpec::new(EncoderId::Custom("head".into()), &head)).unwrap_err();
        assert!(err.to_string().contains("classification head"), "{err}");

        let unpooled = stub(dir.path(), "unpooled", &onnx_graph::unpooled_encoder());
        let mut spec = EncoderSpec::new(EncoderId::Custom("unpooled".into()), &unpooled);
        spec.input_size = InputSize::Fixed(32, 32);
        assert!(Encoder::load(spec).unwrap_err().to_string().contains("rank 2"));

        let renamed = stub(
            dir.path(),
            "renamed",
            &onnx_graph::renamed(onnx_graph::pooled_projection_encoder(8, None), "input", "logits"),
        );
        assert!(Encoder::load(EncoderSpec::new(EncoderId::Custom("r".into()), &renamed)).is_err());

        // declared width disagrees with the graph
        let p = stub(dir.path(), "resnet", &onnx_graph::pooled_projection_encoder(64, None));
        let err = Encoder::load(EncoderSpec::new(EncoderId::ResNet50Penultimate, &p)).unwrap_err();
        assert!(err.to_string().contains("2048"), "{err}");
    }

    #[test]
    fn manifest_is_verified() {
        let dir = tempfile::tempdir().unwrap();
        let m = onnx_graph::pooled_projection_encoder(12, None);
        let p = stub(dir.path(), "proj", &m);
        let bytes = std::fs::read(&p).unwrap();
        let good = ExportManifest {
            encoder_id: "proj".into(),
            source_checkpoint: "synthetic".into(),
            opset: 13,
            input: ManifestInput::Dynamic("dynamic".into()),
            output_dim: 12,
            sha256: sha256_hex(&bytes),
        };
        let write = |m: &ExportManifest| std::fs::write(manifest_path(&p), serde_json::to_string(m).unwrap()).unwrap();
        let spec = EncoderSpec::new(EncoderId::Custom("proj".into()), &p);
        write(&good);
        assert_eq!(Encoder::load(spec.clone()).unwrap().manifest(), Some(&good));
        for bad in [
            ExportManifest { sha256: "00".repeat(32), ..good.clone() },
            ExportManifest { output_dim: 13, ..good.clone() },
            ExportManifest { encoder_id: "other".into(), ..good.clone() },
            ExportManifest { input: ManifestInput::Fixed { height: 224, width: 224 }, ..good.clone() },
        ] {
            write(&bad);
            let err = Encoder::load(spec.clone()).unwrap_err();
            assert!(err.to_string().contains("refusing"), "{err}");
        }
        let fixed: ExportManifest = serde_json::from_str(
            r#"{"encoder_id":"clip-vit-b32","source_checkpoint":"openai/clip-vit-base-patch32","opset":17,
                "input":{"height":224,"width":224},"output_dim":512,"sha256":"ab"}"#,
        )
        .unwrap();
        assert_eq!(fixed.input, ManifestInput::Fixed { height: 224, width: 224 });
    }
}
