//! Small hand-built ONNX graphs with the encoder interface
//! (`pixel_values` N×3×H×W → `embedding` N×d). Used as stub encoders in
//! tests and synthetic runs.

use prost::Message;
use tract_onnx::pb::{
    attribute_proto::AttributeType, tensor_proto::DataType, tensor_shape_proto, type_proto, AttributeProto,
    GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto, TensorShapeProto, TypeProto, ValueInfoProto,
};

pub const INPUT_NAME: &str = "pixel_values";
pub const OUTPUT_NAME: &str = "embedding";

/// A dimension in a value-info shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Fixed(usize),
    Symbol(&'static str),
}

fn value_info(name: &str, dims: &[Dim]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .map(|d| tensor_shape_proto::Dimension {
            denotation: String::new(),
            value: Some(match d {
                Dim::Fixed(v) => tensor_shape_proto::dimension::Value::DimValue(*v as i64),
                Dim::Symbol(s) => tensor_shape_proto::dimension::Value::DimParam(s.to_string()),
            }),
        })
        .collect();
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            denotation: String::new(),
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto { dim }),
            })),
        }),
        ..Default::default()
    }
}

fn ints_attr(name: &str, ints: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: ints.to_vec(),
        ..Default::default()
    }
}

fn int_attr(name: &str, i: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Int as i32,
        i,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], outputs: &[&str], attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: outputs.iter().map(|s| s.to_string()).collect(),
        name: format!("{op}_{}", outputs[0]),
        op_type: op.into(),
        attribute,
        ..Default::default()
    }
}

fn model(graph: GraphProto, opset: i64) -> ModelProto {
    ModelProto {
        ir_version: 8,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: opset,
        }],
        producer_name: "medembed".into(),
        graph: Some(graph),
        ..Default::default()
    }
}

fn input_dims(height: Option<usize>, width: Option<usize>) -> Vec<Dim> {
    vec![
        Dim::Symbol("N"),
        Dim::Fixed(3),
        height.map_or(Dim::Symbol("H"), Dim::Fixed),
        width.map_or(Dim::Symbol("W"), Dim::Fixed),
    ]
}

/// Channel mean followed by flattening: output width `H·W`. With the
/// standard normalization undone this is an identity on the pixel grid,
/// which makes it a convenient stub encoder.
pub fn channel_mean_encoder(height: usize, width: usize) -> ModelProto {
    let graph = GraphProto {
        name: "channel_mean".into(),
        node: vec![
            node("ReduceMean", &[INPUT_NAME], &["mean"], vec![ints_attr("axes", &[1]), int_attr("keepdims", 0)]),
            node("Flatten", &["mean"], &[OUTPUT_NAME], vec![int_attr("axis", 1)]),
        ],
        input: vec![value_info(INPUT_NAME, &input_dims(Some(height), Some(width)))],
        output: vec![value_info(OUTPUT_NAME, &[Dim::Symbol("N"), Dim::Fixed(height * width)])],
        ..Default::default()
    };
    model(graph, 13)
}

/// Global average pooling then a dense projection to `width` outputs
/// (weights `w[c][j] = (c + 1)·(j + 1)/width`). Spatial size may be
/// dynamic.
pub fn pooled_projection_encoder(width: usize, spatial: Option<(usize, usize)>) -> ModelProto {
    let weights: Vec<f32> = (0..3)
        .flat_map(|c| (0..width).map(move |j| ((c + 1) * (j + 1)) as f32 / width as f32))
        .collect();
    let init = TensorProto {
        dims: vec![3, width as i64],
        data_type: DataType::Float as i32,
        float_data: weights,
        name: "proj".into(),
        ..Default::default()
    };
    let graph = GraphProto {
        name: "pooled_projection".into(),
        node: vec![
            node("GlobalAveragePool", &[INPUT_NAME], &["pooled"], vec![]),
            node("Flatten", &["pooled"], &["flat"], vec![int_attr("axis", 1)]),
            node("MatMul", &["flat", "proj"], &[OUTPUT_NAME], vec![]),
        ],
        initializer: vec![init],
        input: vec![value_info(
            INPUT_NAME,
            &input_dims(spatial.map(|s| s.0), spatial.map(|s| s.1)),
        )],
        output: vec![value_info(OUTPUT_NAME, &[Dim::Symbol("N"), Dim::Fixed(width)])],
        ..Default::default()
    };
    model(graph, 13)
}

/// Graph whose single output keeps the spatial axes (rank 4).
pub fn unpooled_encoder() -> ModelProto {
    let graph = GraphProto {
        name: "unpooled".into(),
        node: vec![node("Relu", &[INPUT_NAME], &[OUTPUT_NAME], vec![])],
        input: vec![value_info(INPUT_NAME, &input_dims(Some(32), Some(32)))],
        output: vec![value_info(OUTPUT_NAME, &input_dims(Some(32), Some(32)))],
        ..Default::default()
    };
    model(graph, 13)
}

/// Rename the graph's input and output (for interface-violation tests).
pub fn renamed(mut m: ModelProto, input: &str, output: &str) -> ModelProto {
    let g = m.graph.as_mut().expect("graph");
    for n in &mut g.node {
        for i in &mut n.input {
            if i == INPUT_NAME {
                *i = input.into();
            }
        }
        for o in &mut n.output {
            if o == OUTPUT_NAME {
                *o = output.into();
            }
        }
    }
    g.input[0].name = input.into();
    g.output[0].name = output.into();
    m
}

pub fn to_bytes(m: &ModelProto) -> Vec<u8> {
    m.encode_to_vec()
}

pub fn write(m: &ModelProto, path: &std::path::Path) -> crate::Result<()> {
    std::fs::write(path, to_bytes(m)).map_err(|e| crate::Error::io(path, e))
}
