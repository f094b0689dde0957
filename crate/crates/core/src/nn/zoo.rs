//! Ready-made architectures.

use super::spec::{LayerKind, LayerSpec, ModelSpec};

/// Wide residual network WRN-`depth`-`widen` for 3x32x32 inputs.
///
/// `(depth - 4) / 6` pre-activation basic blocks per group; groups of
/// `16k`, `32k`, `64k` channels with strides 1, 2, 2; then
/// batchnorm, ReLU, global average pool and a dense classifier.
pub fn wrn(depth: usize, widen: usize, classes: usize) -> ModelSpec {
    assert!(depth >= 10 && (depth - 4) % 6 == 0, "WRN depth must be 6n+4");
    let per_group = (depth - 4) / 6;
    let mut layers = vec![LayerSpec::new(
        "conv1",
        LayerKind::Conv2d {
            channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
    )];
    for (g, (width, stride)) in [(16 * widen, 1), (32 * widen, 2), (64 * widen, 2)]
        .into_iter()
        .enumerate()
    {
        for b in 0..per_group {
            layers.push(LayerSpec::new(
                format!("group{}_block{}", g + 1, b + 1),
                LayerKind::ResidualBlock {
                    channels: width,
                    stride: if b == 0 { stride } else { 1 },
                },
            ));
        }
    }
    layers.extend([
        LayerSpec::new("bn_final", LayerKind::BatchnormStub),
        LayerSpec::new("relu_final", LayerKind::Relu),
        LayerSpec::new("avgpool", LayerKind::AvgpoolGlobal),
        LayerSpec::new(
            "fc",
            LayerKind::Dense {
                units: classes,
                bias: true,
            },
        ),
        LayerSpec::new("output", LayerKind::SoftmaxOutput),
    ]);
    ModelSpec::new(vec![3, 32, 32], layers)
}

/// Multilayer perceptron with ReLU hidden layers named `fc{i}` / `relu{i}`.
/// The last hidden activation is `relu{len}`.
pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(LayerSpec::new(
            format!("fc{}", i + 1),
            LayerKind::Dense { units: h, bias: true },
        ));
        layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
    }
    layers.push(LayerSpec::new(
        "logits",
        LayerKind::Dense {
            units: classes,
            bias: true,
        },
    ));
    layers.push(LayerSpec::new("output", LayerKind::SoftmaxOutput));
    ModelSpec::new(vec![inputs], layers)
}

/// Small CNN: `conv(k, pad) -> relu` per entry of `channels`, then global
/// average pool (`avgpool`) and a dense classifier. The last convolution is
/// `conv{len}` followed by `relu{len}`.
pub fn small_cnn(input: [usize; 3], channels: &[usize], kernel: usize, padding: usize, classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        layers.push(LayerSpec::new(
            format!("conv{}", i + 1),
            LayerKind::Conv2d {
                channels: c,
                kernel,
                stride: 1,
                padding,
                bias: true,
            },
        ));
        layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
    }
    layers.push(LayerSpec::new("avgpool", LayerKind::AvgpoolGlobal));
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Dense {
            units: classes,
            bias: true,
        },
    ));
    layers.push(LayerSpec::new("output", LayerKind::SoftmaxOutput));
    ModelSpec::new(input.to_vec(), layers)
}
