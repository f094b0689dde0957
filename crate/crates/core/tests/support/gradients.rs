//! Finite-difference harness shared by the gradient tests and the
//! acceptance suite: seeded random models covering every layer kind, checked
//! under every loss kind.
#![allow(dead_code)]

use std::collections::BTreeSet;

use edgeflow::nn::gradcheck::{compare, numeric_input_grad, numeric_param_grad, DEFAULT_EPS};
use edgeflow::nn::{build_model, loss_and_grad, LayerKind, LayerSpec, LossSpec, Model, ModelSpec, Targets};
use edgeflow::rng::derived_rng;
use edgeflow::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TOL: f64 = 1e-4;
// below this magnitude a central difference at eps 1e-5 is dominated by f64
// cancellation noise (about 1e-16 * |loss| / eps), so errors are taken absolute
pub const FLOOR: f64 = 1e-5;

pub fn conv(id: &str, channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(
        id,
        LayerKind::Conv2d {
            channels,
            kernel,
            stride,
            padding,
            bias: true,
        },
    )
}

/// Exercises every layer kind: conv (strided + padded), batchnorm, relu,
/// residual blocks with identity and projection shortcuts, global pooling,
/// dense, concat and the softmax output marker.
pub fn conv_spec() -> ModelSpec {
    ModelSpec::new(
        vec![2, 5, 5],
        vec![
            conv("c1", 3, 3, 1, 1),
            LayerSpec::new("bn1", LayerKind::BatchnormStub),
            LayerSpec::new("r1", LayerKind::Relu),
            LayerSpec::new("res1", LayerKind::ResidualBlock { channels: 3, stride: 1 }),
            LayerSpec::new("res2", LayerKind::ResidualBlock { channels: 4, stride: 2 }),
            conv("c2", 4, 2, 1, 0),
            LayerSpec::new("r2", LayerKind::Relu),
            LayerSpec::new("gap", LayerKind::AvgpoolGlobal),
            LayerSpec::new("fc1", LayerKind::Dense { units: 5, bias: true }),
            LayerSpec::new("bn2", LayerKind::BatchnormStub),
            LayerSpec::new("r3", LayerKind::Relu),
            LayerSpec::new(
                "cat",
                LayerKind::Concat {
                    inputs: vec!["gap".into(), "r3".into()],
                },
            ),
            LayerSpec::new("fc2", LayerKind::Dense { units: 3, bias: true }),
            LayerSpec::new("out", LayerKind::SoftmaxOutput),
        ],
    )
}

pub fn mlp_spec() -> ModelSpec {
    ModelSpec::new(
        vec![4],
        vec![
            LayerSpec::new("fc1", LayerKind::Dense { units: 6, bias: true }),
            LayerSpec::new("r1", LayerKind::Relu),
            LayerSpec::new("fc2", LayerKind::Dense { units: 5, bias: false }),
            LayerSpec::new("bn", LayerKind::BatchnormStub),
            LayerSpec::new("gap", LayerKind::Relu),
            LayerSpec::new("fc3", LayerKind::Dense { units: 3, bias: true }),
            LayerSpec::new("out", LayerKind::SoftmaxOutput),
        ],
    )
}

pub fn randomized(spec: &ModelSpec, seed: u64) -> Model {
    let mut m = build_model(spec, seed).unwrap();
    // perturb every parameter so biases and batchnorm affines are non-trivial
    let mut rng = derived_rng(seed, &[99]);
    for p in m.params_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *p += 0.3 * z;
    }
    m
}

pub fn random_tensor(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut rng = derived_rng(seed, &[stream]);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

pub fn losses() -> Vec<LossSpec> {
    vec![
        LossSpec::CrossEntropy,
        LossSpec::Fedmax {
            beta: 0.7,
            layer: "gap".into(),
        },
        LossSpec::Kd {
            temperature: 2.5,
            alpha: 0.3,
        },
        LossSpec::ActivationMatch { layer: "gap".into() },
    ]
}

/// Worst errors of one seeded model over every loss kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeedReport {
    pub worst_param: f64,
    pub worst_input: f64,
    pub compared: usize,
    pub skipped_kinks: usize,
}

pub fn check(spec: &ModelSpec, seed: u64) -> SeedReport {
    let model = randomized(spec, seed);
    let batch = 3;
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = random_tensor(&shape, seed, 1);
    let mut rng = derived_rng(seed, &[2]);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let teacher = random_tensor(&[batch, 3], seed, 3);
    let gap_width: usize = model.layer_output_shape("gap").unwrap().iter().product();
    let target = random_tensor(&[batch, gap_width], seed, 4);

    let mut out = SeedReport::default();
    for loss in losses() {
        let targets = Targets {
            labels: Some(&labels),
            teacher_logits: Some(&teacher),
            activations: Some(&target),
        };
        let capture: BTreeSet<String> = loss.capture_layer().map(str::to_string).into_iter().collect();
        let fwd = model.forward(&x, &capture).unwrap();
        let lg = loss_and_grad(&loss, &fwd.outputs, &fwd.captured, targets).unwrap();
        let grads = model.backward(&fwd.tape, &lg.seed).unwrap();
        assert_eq!(grads.params.len(), model.param_count());

        let numeric = numeric_param_grad(&model, &x, &loss, targets, DEFAULT_EPS).unwrap();
        let c = compare(&grads.params, &numeric, FLOOR);
        out.worst_param = out.worst_param.max(c.max_rel_error);
        out.compared += c.compared;
        out.skipped_kinks += c.skipped_kinks;

        let numeric_x = numeric_input_grad(&model, &x, &loss, targets, DEFAULT_EPS).unwrap();
        let c = compare(grads.input.data(), &numeric_x, FLOOR);
        out.worst_input = out.worst_input.max(c.max_rel_error);
        out.compared += c.compared;
        out.skipped_kinks += c.skipped_kinks;
    }
    out
}
