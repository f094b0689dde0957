//! Exact parameter and FLOP accounting.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs. Convolutions cost
//! `2 * Hout * Wout * Cout * Cin * k^2`, dense layers `2 * in * out`. Bias
//! additions, activations, batchnorm, pooling and residual additions are
//! counted as zero.

use super::spec::{LayerKind, ModelSpec, Shape};
use crate::error::Result;

pub(crate) fn residual_needs_projection(in_channels: usize, channels: usize, stride: usize) -> bool {
    in_channels != channels || stride != 1
}

/// Number of parameters a layer owns given its input shape.
pub(crate) fn layer_params(kind: &LayerKind, input: &[usize]) -> usize {
    match kind {
        LayerKind::Dense { units, bias } => {
            let fan_in: usize = input.iter().product();
            fan_in * units + if *bias { *units } else { 0 }
        }
        LayerKind::Conv2d {
            channels,
            kernel,
            bias,
            ..
        } => channels * input[0] * kernel * kernel + if *bias { *channels } else { 0 },
        LayerKind::BatchnormStub => 2 * input[0],
        LayerKind::ResidualBlock { channels, stride } => {
            let cin = input[0];
            let mut n = 2 * cin + channels * cin * 9 + 2 * channels + channels * channels * 9;
            if residual_needs_projection(cin, *channels, *stride) {
                n += channels * cin;
            }
            n
        }
        LayerKind::Relu
        | LayerKind::AvgpoolGlobal
        | LayerKind::SoftmaxOutput
        | LayerKind::Concat { .. } => 0,
    }
}

fn layer_flops(kind: &LayerKind, input: &[usize], output: &Shape) -> u64 {
    match kind {
        LayerKind::Dense { units, .. } => {
            let fan_in: u64 = input.iter().product::<usize>() as u64;
            2 * fan_in * *units as u64
        }
        LayerKind::Conv2d {
            channels, kernel, ..
        } => {
            let (oh, ow) = (output[1] as u64, output[2] as u64);
            2 * oh * ow * *channels as u64 * input[0] as u64 * (kernel * kernel) as u64
        }
        LayerKind::ResidualBlock { channels, stride } => {
            let (oh, ow) = (output[1] as u64, output[2] as u64);
            let (cin, cout) = (input[0] as u64, *channels as u64);
            let mut f = 2 * oh * ow * cout * cin * 9 + 2 * oh * ow * cout * cout * 9;
            if residual_needs_projection(input[0], *channels, *stride) {
                f += 2 * oh * ow * cout * cin;
            }
            f
        }
        _ => 0,
    }
}

/// Exact parameter count including biases and batchnorm affine parameters.
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    Ok(per_layer_params(spec)?.iter().sum())
}

pub fn per_layer_params(spec: &ModelSpec) -> Result<Vec<usize>> {
    let plan = spec.plan()?;
    Ok(spec
        .layers
        .iter()
        .zip(&plan.input_shapes)
        .map(|(l, s)| layer_params(&l.kind, s))
        .collect())
}

/// FLOPs of one forward pass over `batch` items.
pub fn count_flops(spec: &ModelSpec, batch: usize) -> Result<u64> {
    Ok(per_layer_flops(spec)?.iter().sum::<u64>() * batch as u64)
}

/// Per-item FLOPs of every layer.
pub fn per_layer_flops(spec: &ModelSpec) -> Result<Vec<u64>> {
    let plan = spec.plan()?;
    Ok(spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_flops(&l.kind, &plan.input_shapes[i], &plan.output_shapes[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn dense(id: &str, units: usize) -> LayerSpec {
        LayerSpec::new(id, LayerKind::Dense { units, bias: true })
    }

    #[test]
    fn dense_counts() {
        let one = ModelSpec::new(vec![4], vec![dense("a", 3)]);
        assert_eq!(count_params(&one).unwrap(), 15);
        assert_eq!(count_flops(&one, 1).unwrap(), 24);
        let two = ModelSpec::new(vec![4], vec![dense("a", 3), dense("b", 2)]);
        assert_eq!(count_params(&two).unwrap(), 23);
    }

    #[test]
    fn toy_conv_hand_count() {
        // conv 2->4, k3, pad1 on 2x6x6: 4*2*9 + 4 = 76 params,
        //   2 * 6*6 * 4*2*9 = 5184 FLOPs
        // bn over 4 channels: 8 params
        // residual 4->8 stride 2 on 6x6 -> 3x3:
        //   bn1 8 + conv1 8*4*9=288 + bn2 16 + conv2 8*8*9=576 + proj 32 = 920 params
        //   FLOPs 2*9*8*4*9 + 2*9*8*8*9 + 2*9*8*4 = 5184 + 10368 + 576 = 16128
        // gap -> 8, dense 8->3: 27 params, 48 FLOPs
        let spec = ModelSpec::new(
            vec![2, 6, 6],
            vec![
                LayerSpec::new(
                    "c1",
                    LayerKind::Conv2d {
                        channels: 4,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: true,
                    },
                ),
                LayerSpec::new("bn", LayerKind::BatchnormStub),
                LayerSpec::new(
                    "res",
                    LayerKind::ResidualBlock {
                        channels: 8,
                        stride: 2,
                    },
                ),
                LayerSpec::new("gap", LayerKind::AvgpoolGlobal),
                dense("fc", 3),
                LayerSpec::new("out", LayerKind::SoftmaxOutput),
            ],
        );
        assert_eq!(per_layer_params(&spec).unwrap(), vec![76, 8, 920, 0, 27, 0]);
        assert_eq!(count_params(&spec).unwrap(), 1031);
        assert_eq!(per_layer_flops(&spec).unwrap(), vec![5184, 0, 16128, 0, 48, 0]);
        assert_eq!(count_flops(&spec, 1).unwrap(), 21360);
        assert_eq!(count_flops(&spec, 3).unwrap(), 3 * 21360);
    }
}
