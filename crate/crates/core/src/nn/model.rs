//! Instantiated models: parameter layout, initialization, forward pass with a
//! recorded tape, and reverse-mode backward.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};

use super::count::{layer_params, residual_needs_projection};
use super::ops::{self, ConvGeom};
use super::spec::{LayerKind, ModelSpec, ShapePlan, Source};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Tensor;

/// Contiguous region of the flat parameter vector owned by one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    plan: ShapePlan,
    slots: Vec<ParamSlot>,
    params: Vec<f64>,
    seed: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Sub-layout of a residual block's parameter slot.
struct ResidualLayout {
    cin: usize,
    cout: usize,
    stride: usize,
    bn1: (usize, usize),
    conv1: (usize, usize),
    bn2: (usize, usize),
    conv2: (usize, usize),
    proj: Option<(usize, usize)>,
}

impl ResidualLayout {
    fn new(cin: usize, cout: usize, stride: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = (at, at + n);
            at += n;
            r
        };
        let bn1 = take(2 * cin);
        let conv1 = take(cout * cin * 9);
        let bn2 = take(2 * cout);
        let conv2 = take(cout * cout * 9);
        let proj = residual_needs_projection(cin, cout, stride).then(|| take(cout * cin));
        ResidualLayout {
            cin,
            cout,
            stride,
            bn1,
            conv1,
            bn2,
            conv2,
            proj,
        }
    }
}

/// Intermediate values a layer keeps for its backward pass.
#[derive(Debug, Clone)]
enum Cache {
    None,
    Residual {
        act1: Vec<f64>,
        conv1: Vec<f64>,
        act2: Vec<f64>,
    },
}

/// Everything the forward pass recorded; consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    fingerprint: u64,
    batch: usize,
    input: Tensor,
    outputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output of layer `index` recorded during forward.
    pub fn layer_output(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }

    /// Hash of which units are active (output > 0) across every ReLU the
    /// forward pass went through, including those inside residual blocks.
    /// Two tapes with equal patterns lie in the same linear piece of the network.
    pub fn relu_pattern(&self, spec: &ModelSpec) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |vals: &[f64]| {
            for &v in vals {
                h ^= (v > 0.0) as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            match (&layer.kind, &self.caches[i]) {
                (LayerKind::Relu, _) => mix(self.outputs[i].data()),
                (_, Cache::Residual { act1, act2, .. }) => {
                    mix(act1);
                    mix(act2);
                }
                _ => {}
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub outputs: Tensor,
    pub captured: BTreeMap<String, Tensor>,
    pub tape: Tape,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Tensor,
}

/// Gradient of a scalar loss with respect to the model outputs and any
/// captured activations.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub outputs: Option<Tensor>,
    pub captured: BTreeMap<String, Tensor>,
}

fn fingerprint(params: &[f64]) -> u64 {
    // FNV-style mixing over whole 64-bit words
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        h = (h ^ p.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        h ^= h >> 29;
    }
    h ^ params.len() as u64
}

/// Builds a model with He fan-in normal weights, zero biases and identity
/// batchnorm affines. The same `(spec, seed)` always yields identical bits.
pub fn build_model(spec: &ModelSpec, init_seed: u64) -> Result<Model> {
    let Model { plan, slots, params, .. } = build_model_layout(spec)?;
    let mut params = params;
    for (i, layer) in spec.layers.iter().enumerate() {
        let slot = slots[i];
        let p = &mut params[slot.offset..slot.offset + slot.len];
        let input = &plan.input_shapes[i];
        let mut rng = derived_rng(init_seed, &[i as u64]);
        let mut he = |dst: &mut [f64], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in dst {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        };
        match &layer.kind {
            LayerKind::Dense { units, .. } => {
                let fan_in: usize = input.iter().product();
                he(&mut p[..fan_in * units], fan_in);
            }
            LayerKind::Conv2d {
                channels, kernel, ..
            } => {
                let fan_in = input[0] * kernel * kernel;
                he(&mut p[..channels * fan_in], fan_in);
            }
            LayerKind::BatchnormStub => {
                p[..input[0]].fill(1.0);
            }
            LayerKind::ResidualBlock { channels, stride } => {
                let lay = ResidualLayout::new(input[0], *channels, *stride);
                p[lay.bn1.0..lay.bn1.0 + lay.cin].fill(1.0);
                he(&mut p[lay.conv1.0..lay.conv1.1], lay.cin * 9);
                p[lay.bn2.0..lay.bn2.0 + lay.cout].fill(1.0);
                he(&mut p[lay.conv2.0..lay.conv2.1], lay.cout * 9);
                if let Some(pr) = lay.proj {
                    he(&mut p[pr.0..pr.1], lay.cin);
                }
            }
            _ => {}
        }
    }
    Ok(Model {
        spec: spec.clone(),
        plan,
        slots,
        params,
        seed: init_seed,
    })
}

impl Model {
    /// Reassembles a model from a spec and an existing parameter vector.
    pub fn from_params(spec: &ModelSpec, params: Vec<f64>, seed: u64) -> Result<Model> {
        let mut m = build_model_layout(spec)?;
        if params.len() != m.params.len() {
            return Err(Error::LengthMismatch {
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        m.seed = seed;
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn layer_params(&self, id: &str) -> Option<&[f64]> {
        let i = self.spec.layer_index(id)?;
        let s = self.slots[i];
        Some(&self.params[s.offset..s.offset + s.len])
    }

    pub fn layer_params_mut(&mut self, id: &str) -> Option<&mut [f64]> {
        let i = self.spec.layer_index(id)?;
        let s = self.slots[i];
        Some(&mut self.params[s.offset..s.offset + s.len])
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.plan.output_shapes.last().map_or(&[], |s| s.as_slice())
    }

    pub fn layer_output_shape(&self, id: &str) -> Option<&[usize]> {
        self.spec
            .layer_index(id)
            .map(|i| self.plan.output_shapes[i].as_slice())
    }

    fn slot(&self, i: usize) -> &[f64] {
        let s = self.slots[i];
        &self.params[s.offset..s.offset + s.len]
    }

    /// Runs the network on a batch, returning the final outputs, the
    /// activations of every layer named in `capture`, and a tape for backward.
    pub fn forward(&self, batch: &Tensor, capture: &BTreeSet<String>) -> Result<ForwardResult> {
        let mut expected = vec![batch.batch()];
        expected.extend_from_slice(&self.spec.input_shape);
        if batch.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        for id in capture {
            if self.spec.layer_index(id).is_none() {
                return Err(Error::MissingCapture(id.clone()));
            }
        }
        let n = batch.batch();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.spec.layers.len());
        let mut caches = Vec::with_capacity(self.spec.layers.len());

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.plan.input_shapes[i];
            let out_shape = &self.plan.output_shapes[i];
            let concat_buf;
            let x: &[f64] = match &self.plan.sources[i] {
                Source::Input => batch.data(),
                Source::Layer(j) => outputs[*j].data(),
                Source::Concat(js) => {
                    concat_buf = concat_items(n, js.iter().map(|&j| &outputs[j]));
                    &concat_buf
                }
            };
            let p = self.slot(i);
            let mut cache = Cache::None;
            let y = match &layer.kind {
                LayerKind::Dense { units, bias } => {
                    let fan_in: usize = in_shape.iter().product();
                    let (w, b) = p.split_at(fan_in * units);
                    ops::dense_forward(n, fan_in, *units, x, w, bias.then_some(b))
                }
                LayerKind::Conv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let g = ConvGeom::new(in_shape, *channels, *kernel, *stride, *padding);
                    let (w, b) = p.split_at(g.weight_len());
                    ops::conv2d_forward(&g, n, x, w, bias.then_some(b))
                }
                LayerKind::Relu => ops::relu_forward(x),
                LayerKind::BatchnormStub => {
                    let c = in_shape[0];
                    let spatial = in_shape[1..].iter().product();
                    ops::affine_forward(n, c, spatial, x, p)
                }
                LayerKind::AvgpoolGlobal => {
                    ops::avgpool_forward(n, in_shape[0], in_shape[1] * in_shape[2], x)
                }
                LayerKind::ResidualBlock { channels, stride } => {
                    let lay = ResidualLayout::new(in_shape[0], *channels, *stride);
                    let (y, c) = residual_forward(&lay, in_shape, n, x, p);
                    cache = c;
                    y
                }
                LayerKind::SoftmaxOutput | LayerKind::Concat { .. } => x.to_vec(),
            };
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(layer.id.clone()));
            }
            let mut shape = vec![n];
            shape.extend_from_slice(out_shape);
            outputs.push(Tensor::new(shape, y)?);
            caches.push(cache);
        }

        let captured = capture
            .iter()
            .map(|id| {
                let i = self.spec.layer_index(id).expect("checked above");
                (id.clone(), outputs[i].clone())
            })
            .collect();
        Ok(ForwardResult {
            outputs: outputs.last().cloned().expect("non-empty model"),
            captured,
            tape: Tape {
                fingerprint: fingerprint(&self.params),
                batch: n,
                input: batch.clone(),
                outputs,
                caches,
            },
        })
    }

    /// Convenience forward without capture.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, &BTreeSet::new())?.outputs)
    }

    /// Reverse-mode pass: propagates `seed` (dLoss/dOutputs and dLoss/dCaptured)
    /// back to every parameter and to the input batch.
    pub fn backward(&self, tape: &Tape, seed: &OutputGrads) -> Result<Gradients> {
        if tape.fingerprint != fingerprint(&self.params) || tape.outputs.len() != self.spec.layers.len() {
            return Err(Error::StaleTape);
        }
        let n = tape.batch;
        let last = self.spec.layers.len() - 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.spec.layers.len()];
        if let Some(g) = &seed.outputs {
            check_same_shape(g, &tape.outputs[last])?;
            grads[last] = Some(g.data().to_vec());
        }
        for (id, g) in &seed.captured {
            let i = self
                .spec
                .layer_index(id)
                .ok_or_else(|| Error::MissingCapture(id.clone()))?;
            check_same_shape(g, &tape.outputs[i])?;
            accumulate(&mut grads[i], g.data());
        }

        let mut dparams = vec![0.0; self.params.len()];
        let mut dinput: Option<Vec<f64>> = None;

        for i in (0..self.spec.layers.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let layer = &self.spec.layers[i];
            let in_shape = &self.plan.input_shapes[i];
            let concat_buf;
            let x: &[f64] = match &self.plan.sources[i] {
                Source::Input => tape.input.data(),
                Source::Layer(j) => tape.outputs[*j].data(),
                Source::Concat(js) => {
                    concat_buf = concat_items(n, js.iter().map(|&j| &tape.outputs[j]));
                    &concat_buf
                }
            };
            let p = self.slot(i);
            let slot = self.slots[i];
            let dp = &mut dparams[slot.offset..slot.offset + slot.len];
            let dx = match &layer.kind {
                LayerKind::Dense { units, bias } => {
                    let fan_in: usize = in_shape.iter().product();
                    let (w, _) = p.split_at(fan_in * units);
                    let (dw, db) = dp.split_at_mut(fan_in * units);
                    ops::dense_backward(n, fan_in, *units, x, w, &dy, dw, bias.then_some(db))
                }
                LayerKind::Conv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let g = ConvGeom::new(in_shape, *channels, *kernel, *stride, *padding);
                    let (w, _) = p.split_at(g.weight_len());
                    let (dw, db) = dp.split_at_mut(g.weight_len());
                    ops::conv2d_backward(&g, n, x, w, &dy, dw, bias.then_some(db))
                }
                LayerKind::Relu => ops::relu_backward(tape.outputs[i].data(), &dy),
                LayerKind::BatchnormStub => {
                    let c = in_shape[0];
                    let spatial = in_shape[1..].iter().product();
                    ops::affine_backward(n, c, spatial, x, p, &dy, dp)
                }
                LayerKind::AvgpoolGlobal => {
                    ops::avgpool_backward(n, in_shape[0], in_shape[1] * in_shape[2], &dy)
                }
                LayerKind::ResidualBlock { channels, stride } => {
                    let lay = ResidualLayout::new(in_shape[0], *channels, *stride);
                    residual_backward(&lay, in_shape, n, x, p, &tape.caches[i], &dy, dp)
                }
                LayerKind::SoftmaxOutput | LayerKind::Concat { .. } => dy,
            };
            match &self.plan.sources[i] {
                Source::Input => accumulate(&mut dinput, &dx),
                Source::Layer(j) => accumulate(&mut grads[*j], &dx),
                Source::Concat(js) => {
                    let widths: Vec<usize> = js.iter().map(|&j| tape.outputs[j].item_len()).collect();
                    let total: usize = widths.iter().sum();
                    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
                    for row in dx.chunks(total) {
                        let mut at = 0;
                        for (part, &w) in parts.iter_mut().zip(&widths) {
                            part.extend_from_slice(&row[at..at + w]);
                            at += w;
                        }
                    }
                    for (&j, part) in js.iter().zip(parts) {
                        accumulate(&mut grads[j], &part);
                    }
                }
            }
        }
        let input = Tensor::new(
            tape.input.shape().to_vec(),
            dinput.unwrap_or_else(|| vec![0.0; tape.input.len()]),
        )?;
        Ok(Gradients {
            params: dparams,
            input,
        })
    }
}

fn build_model_layout(spec: &ModelSpec) -> Result<Model> {
    let plan = spec.plan()?;
    let mut slots = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    for (l, s) in spec.layers.iter().zip(&plan.input_shapes) {
        let len = layer_params(&l.kind, s);
        slots.push(ParamSlot { offset, len });
        offset += len;
    }
    Ok(Model {
        spec: spec.clone(),
        plan,
        slots,
        params: vec![0.0; offset],
        seed: 0,
    })
}

fn check_same_shape(g: &Tensor, reference: &Tensor) -> Result<()> {
    if g.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: reference.shape().to_vec(),
            actual: g.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn concat_items<'a>(n: usize, parts: impl Iterator<Item = &'a Tensor> + Clone) -> Vec<f64> {
    let mut out = Vec::new();
    for row in 0..n {
        for t in parts.clone() {
            out.extend_from_slice(t.item(row));
        }
    }
    out
}

fn residual_forward(
    lay: &ResidualLayout,
    in_shape: &[usize],
    n: usize,
    x: &[f64],
    p: &[f64],
) -> (Vec<f64>, Cache) {
    let spatial_in = in_shape[1] * in_shape[2];
    let g1 = ConvGeom::new(in_shape, lay.cout, 3, lay.stride, 1);
    let mid_shape = [lay.cout, g1.oh, g1.ow];
    let g2 = ConvGeom::new(&mid_shape, lay.cout, 3, 1, 1);

    let act1 = ops::relu_forward(&ops::affine_forward(
        n,
        lay.cin,
        spatial_in,
        x,
        &p[lay.bn1.0..lay.bn1.1],
    ));
    let conv1 = ops::conv2d_forward(&g1, n, &act1, &p[lay.conv1.0..lay.conv1.1], None);
    let act2 = ops::relu_forward(&ops::affine_forward(
        n,
        lay.cout,
        g1.oh * g1.ow,
        &conv1,
        &p[lay.bn2.0..lay.bn2.1],
    ));
    let mut y = ops::conv2d_forward(&g2, n, &act2, &p[lay.conv2.0..lay.conv2.1], None);
    match lay.proj {
        Some(pr) => {
            let gp = ConvGeom::new(in_shape, lay.cout, 1, lay.stride, 0);
            let short = ops::conv2d_forward(&gp, n, &act1, &p[pr.0..pr.1], None);
            y.iter_mut().zip(&short).for_each(|(a, b)| *a += b);
        }
        None => y.iter_mut().zip(x).for_each(|(a, b)| *a += b),
    }
    (y, Cache::Residual { act1, conv1, act2 })
}

#[allow(clippy::too_many_arguments)]
fn residual_backward(
    lay: &ResidualLayout,
    in_shape: &[usize],
    n: usize,
    x: &[f64],
    p: &[f64],
    cache: &Cache,
    dy: &[f64],
    dp: &mut [f64],
) -> Vec<f64> {
    let Cache::Residual { act1, conv1, act2 } = cache else {
        unreachable!("residual layer without residual cache")
    };
    let spatial_in = in_shape[1] * in_shape[2];
    let g1 = ConvGeom::new(in_shape, lay.cout, 3, lay.stride, 1);
    let mid_shape = [lay.cout, g1.oh, g1.ow];
    let g2 = ConvGeom::new(&mid_shape, lay.cout, 3, 1, 1);

    let (head, tail) = dp.split_at_mut(lay.conv2.0);
    let dconv2 = &mut tail[..lay.conv2.1 - lay.conv2.0];
    let dact2 = ops::conv2d_backward(&g2, n, act2, &p[lay.conv2.0..lay.conv2.1], dy, dconv2, None);
    let dbn2_out = ops::relu_backward(act2, &dact2);
    let dconv1_out = ops::affine_backward(
        n,
        lay.cout,
        g1.oh * g1.ow,
        conv1,
        &p[lay.bn2.0..lay.bn2.1],
        &dbn2_out,
        &mut head[lay.bn2.0..lay.bn2.1],
    );
    let mut dact1 = ops::conv2d_backward(
        &g1,
        n,
        act1,
        &p[lay.conv1.0..lay.conv1.1],
        &dconv1_out,
        &mut head[lay.conv1.0..lay.conv1.1],
        None,
    );
    let mut dx_identity = None;
    match lay.proj {
        Some(pr) => {
            let gp = ConvGeom::new(in_shape, lay.cout, 1, lay.stride, 0);
            let dshort = ops::conv2d_backward(&gp, n, act1, &p[pr.0..pr.1], dy, &mut tail[pr.0 - lay.conv2.0..pr.1 - lay.conv2.0], None);
            dact1.iter_mut().zip(&dshort).for_each(|(a, b)| *a += b);
        }
        None => dx_identity = Some(dy),
    }
    let dbn1_out = ops::relu_backward(act1, &dact1);
    let mut dx = ops::affine_backward(
        n,
        lay.cin,
        spatial_in,
        x,
        &p[lay.bn1.0..lay.bn1.1],
        &dbn1_out,
        &mut head[lay.bn1.0..lay.bn1.1],
    );
    if let Some(d) = dx_identity {
        dx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    dx
}
