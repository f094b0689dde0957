//! Declarative model descriptions and shape inference.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_VERSION: u32 = 1;

/// Per-item shape (no batch axis): `[channels, height, width]` or `[features]`.
pub type Shape = Vec<usize>;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Fully connected layer over the flattened input.
    Dense {
        units: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    /// Spatial mean of every channel: `[c, h, w] -> [c]`.
    AvgpoolGlobal,
    /// Frozen per-channel affine `y = gamma * x + beta`.
    BatchnormStub,
    /// Pre-activation wide-resnet basic block:
    /// `bn -> relu -> conv3x3(stride) -> bn -> relu -> conv3x3`, plus a 1x1
    /// projection shortcut whenever the channel count or stride changes.
    ResidualBlock {
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// Terminal marker. Forward passes logits through unchanged; the softmax is
    /// fused into the loss.
    SoftmaxOutput,
    /// Flattens and concatenates the outputs of earlier layers.
    Concat { inputs: Vec<String> },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::AvgpoolGlobal => "avgpool_global",
            LayerKind::BatchnormStub => "batchnorm_stub",
            LayerKind::ResidualBlock { .. } => "residual_block",
            LayerKind::SoftmaxOutput => "softmax_output",
            LayerKind::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDocument", into = "SpecDocument")]
pub struct ModelSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    version: u32,
    input_shape: Shape,
    layers: Vec<LayerSpec>,
}

impl TryFrom<SpecDocument> for ModelSpec {
    type Error = Error;

    fn try_from(doc: SpecDocument) -> Result<Self> {
        if doc.version != SPEC_VERSION {
            return Err(Error::InvalidSpec(format!(
                "unsupported spec version {} (expected {SPEC_VERSION})",
                doc.version
            )));
        }
        Ok(ModelSpec {
            input_shape: doc.input_shape,
            layers: doc.layers,
        })
    }
}

impl From<ModelSpec> for SpecDocument {
    fn from(s: ModelSpec) -> Self {
        SpecDocument {
            version: SPEC_VERSION,
            input_shape: s.input_shape,
            layers: s.layers,
        }
    }
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Source {
    Input,
    Layer(usize),
    Concat(Vec<usize>),
}

/// Shape information for a validated spec.
#[derive(Debug, Clone)]
pub struct ShapePlan {
    pub(crate) sources: Vec<Source>,
    pub input_shapes: Vec<Shape>,
    pub output_shapes: Vec<Shape>,
}

impl ModelSpec {
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s).map_err(|e| Error::json("<inline>", e))?;
        spec.plan()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        spec.plan()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(self.plan()?.output_shapes.last().cloned().unwrap_or_default())
    }

    /// Validates the spec and infers every layer's input and output shape.
    pub fn plan(&self) -> Result<ShapePlan> {
        if self.input_shape.is_empty()
            || self.input_shape.len() == 2
            || self.input_shape.len() > 3
            || self.input_shape.contains(&0)
        {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} must be (channels, height, width) or (features,) with positive sizes",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut sources = Vec::with_capacity(self.layers.len());
        let mut input_shapes = Vec::with_capacity(self.layers.len());
        let mut output_shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;

        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id.is_empty() {
                return Err(Error::InvalidSpec(format!("layer {i} has an empty id")));
            }
            if index.insert(layer.id.as_str(), i).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate layer id `{}`", layer.id)));
            }
            check_hyperparameters(layer)?;
            if matches!(layer.kind, LayerKind::SoftmaxOutput) && i != last {
                return Err(Error::InvalidSpec(format!(
                    "softmax_output layer `{}` must be the last layer",
                    layer.id
                )));
            }

            let (source, in_shape, from) = match &layer.kind {
                LayerKind::Concat { inputs } => {
                    if inputs.is_empty() {
                        return Err(Error::InvalidSpec(format!(
                            "concat layer `{}` has no inputs",
                            layer.id
                        )));
                    }
                    let mut idx = Vec::with_capacity(inputs.len());
                    let mut width = 0;
                    for name in inputs {
                        let j = *index.get(name.as_str()).filter(|&&j| j < i).ok_or_else(|| {
                            Error::InvalidSpec(format!(
                                "concat layer `{}` references unknown or later layer `{name}`",
                                layer.id
                            ))
                        })?;
                        width += output_shapes[j].iter().product::<usize>();
                        idx.push(j);
                    }
                    (Source::Concat(idx), vec![width], inputs.join("+"))
                }
                _ if i == 0 => (Source::Input, self.input_shape.clone(), "input".to_string()),
                _ => (
                    Source::Layer(i - 1),
                    output_shapes[i - 1].clone(),
                    self.layers[i - 1].id.clone(),
                ),
            };
            let out = layer_output_shape(&layer.kind, &in_shape).map_err(|reason| {
                Error::ShapeComposition {
                    from,
                    from_shape: in_shape.clone(),
                    to: layer.id.clone(),
                    reason,
                }
            })?;
            sources.push(source);
            input_shapes.push(in_shape);
            output_shapes.push(out);
        }
        Ok(ShapePlan {
            sources,
            input_shapes,
            output_shapes,
        })
    }
}

fn check_hyperparameters(layer: &LayerSpec) -> Result<()> {
    let bad = |what: &str| {
        Err(Error::InvalidSpec(format!(
            "layer `{}`: {what} must be positive",
            layer.id
        )))
    };
    match &layer.kind {
        LayerKind::Dense { units, .. } if *units == 0 => bad("units"),
        LayerKind::Conv2d {
            channels,
            kernel,
            stride,
            ..
        } => {
            if *channels == 0 {
                bad("channels")
            } else if *kernel == 0 {
                bad("kernel")
            } else if *stride == 0 {
                bad("stride")
            } else {
                Ok(())
            }
        }
        LayerKind::ResidualBlock { channels, stride } => {
            if *channels == 0 {
                bad("channels")
            } else if *stride == 0 {
                bad("stride")
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn layer_output_shape(kind: &LayerKind, input: &[usize]) -> std::result::Result<Shape, String> {
    match kind {
        LayerKind::Dense { units, .. } => Ok(vec![*units]),
        LayerKind::Conv2d {
            channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let [_, h, w] = spatial(input)?;
            let oh = conv_out(h, *kernel, *stride, *padding);
            let ow = conv_out(w, *kernel, *stride, *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(vec![*channels, oh, ow]),
                _ => Err(format!(
                    "kernel {kernel} does not fit padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                )),
            }
        }
        LayerKind::Relu | LayerKind::BatchnormStub => Ok(input.to_vec()),
        LayerKind::AvgpoolGlobal => {
            let [c, _, _] = spatial(input)?;
            Ok(vec![c])
        }
        LayerKind::ResidualBlock { channels, stride } => {
            let [_, h, w] = spatial(input)?;
            let oh = conv_out(h, 3, *stride, 1).ok_or("input too small for 3x3 convolution")?;
            let ow = conv_out(w, 3, *stride, 1).ok_or("input too small for 3x3 convolution")?;
            Ok(vec![*channels, oh, ow])
        }
        LayerKind::SoftmaxOutput => {
            if input.len() == 1 {
                Ok(input.to_vec())
            } else {
                Err("softmax_output expects a flat logit vector".into())
            }
        }
        LayerKind::Concat { .. } => Ok(input.to_vec()),
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(format!("expected a (channels, height, width) input, got {input:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(id: &str, units: usize) -> LayerSpec {
        LayerSpec::new(id, LayerKind::Dense { units, bias: true })
    }

    #[test]
    fn shapes_compose() {
        let spec = ModelSpec::new(
            vec![1, 5, 5],
            vec![
                LayerSpec::new(
                    "c1",
                    LayerKind::Conv2d {
                        channels: 4,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        bias: true,
                    },
                ),
                LayerSpec::new("r1", LayerKind::Relu),
                LayerSpec::new("gap", LayerKind::AvgpoolGlobal),
                dense("fc", 3),
                LayerSpec::new("out", LayerKind::SoftmaxOutput),
            ],
        );
        let plan = spec.plan().unwrap();
        assert_eq!(plan.output_shapes[0], vec![4, 3, 3]);
        assert_eq!(plan.output_shapes[2], vec![4]);
        assert_eq!(spec.output_shape().unwrap(), vec![3]);
    }

    #[test]
    fn composition_error_names_both_layers() {
        let spec = ModelSpec::new(
            vec![8],
            vec![dense("fc1", 4), LayerSpec::new("gap", LayerKind::AvgpoolGlobal)],
        );
        match spec.plan() {
            Err(Error::ShapeComposition { from, to, .. }) => {
                assert_eq!(from, "fc1");
                assert_eq!(to, "gap");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kernel_must_fit() {
        let spec = ModelSpec::new(
            vec![1, 2, 2],
            vec![LayerSpec::new(
                "c",
                LayerKind::Conv2d {
                    channels: 1,
                    kernel: 5,
                    stride: 1,
                    padding: 1,
                    bias: false,
                },
            )],
        );
        let err = spec.plan().unwrap_err().to_string();
        assert!(err.contains("input") && err.contains("`c`"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_misplaced_softmax() {
        let dup = ModelSpec::new(vec![2], vec![dense("a", 2), dense("a", 2)]);
        assert!(dup.plan().is_err());
        let early = ModelSpec::new(
            vec![2],
            vec![LayerSpec::new("o", LayerKind::SoftmaxOutput), dense("a", 2)],
        );
        assert!(early.plan().is_err());
        let zero = ModelSpec::new(vec![2], vec![dense("a", 0)]);
        assert!(zero.plan().is_err());
    }

    #[test]
    fn concat_widths_add() {
        let spec = ModelSpec::new(
            vec![3],
            vec![
                dense("a", 4),
                LayerSpec::new("r", LayerKind::Relu),
                dense("b", 2),
                LayerSpec::new(
                    "cat",
                    LayerKind::Concat {
                        inputs: vec!["r".into(), "b".into()],
                    },
                ),
            ],
        );
        assert_eq!(spec.output_shape().unwrap(), vec![6]);
        let bad = ModelSpec::new(
            vec![3],
            vec![LayerSpec::new(
                "cat",
                LayerKind::Concat {
                    inputs: vec!["later".into()],
                },
            )],
        );
        assert!(bad.plan().is_err());
    }

    #[test]
    fn json_is_versioned() {
        let spec = ModelSpec::new(vec![4], vec![dense("fc", 3)]);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"version\":1"));
        assert!(text.contains("\"kind\":\"dense\""));
        assert_eq!(ModelSpec::from_json_str(&text).unwrap(), spec);
        let wrong = text.replace("\"version\":1", "\"version\":2");
        assert!(ModelSpec::from_json_str(&wrong).is_err());
    }
}
