//! Training disjoint students and fusing their features.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::{StudentEnsembleSpec, FEATURE_LAYER};
use super::graph::filter_importances;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::fed::macro_f1;
use crate::io::{load_model, save_model};
use crate::nn::{
    build_model, fit, loss_and_grad, predict_batched, sgd_step, LossSpec, Model, OutputGrads, SgdConfig, SgdState, Targets,
    TrainConfig, TrainData,
};
use crate::rng::{derive_seed, derived_rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub spec: StudentEnsembleSpec,
    pub students: Vec<Model>,
    pub fusion: Model,
}

impl Ensemble {
    /// Student `s` is initialized from `(seed, s)`, the fusion layer from
    /// `(seed, S)`.
    pub fn init(spec: &StudentEnsembleSpec, seed: u64) -> Result<Ensemble> {
        spec.validate()?;
        let students = spec
            .students
            .iter()
            .enumerate()
            .map(|(s, p)| build_model(&p.spec, derive_seed(seed, &[s as u64])))
            .collect::<Result<_>>()?;
        let fusion = build_model(&spec.fusion, derive_seed(seed, &[spec.students.len() as u64]))?;
        Ok(Ensemble {
            spec: spec.clone(),
            students,
            fusion,
        })
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.students.iter().map(Model::param_count).sum::<usize>() + self.fusion.param_count()
    }

    /// Writes `ensemble.json`, `student{s}.{bin,json}` and `fusion.{bin,json}`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ensemble.json");
        self.spec.save(&path)?;
        for (s, m) in self.students.iter().enumerate() {
            save_model(m, dir, &format!("student{s}"))?;
        }
        save_model(&self.fusion, dir, "fusion")?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Ensemble> {
        let spec = StudentEnsembleSpec::load(&dir.join("ensemble.json"))?;
        let students: Vec<Model> = (0..spec.students.len())
            .map(|s| load_model(&dir.join(format!("student{s}.json"))))
            .collect::<Result<_>>()?;
        for (s, (m, plan)) in students.iter().zip(&spec.students).enumerate() {
            if m.spec() != &plan.spec {
                return Err(Error::Corrupt(format!("student {s} weights do not match the ensemble spec")));
            }
        }
        let fusion = load_model(&dir.join("fusion.json"))?;
        if fusion.spec() != &spec.fusion {
            return Err(Error::Corrupt("fusion weights do not match the ensemble spec".into()));
        }
        Ok(Ensemble { spec, students, fusion })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonnTrainConfig {
    /// Phase 1: each student alone, matching its filters' importances.
    pub student_epochs: usize,
    /// Phase 2: fusion layer on frozen student features.
    pub fusion_epochs: usize,
    /// Phase 3: everything jointly; 0 disables it.
    #[serde(default)]
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Weight of the activation-matching term during fine-tuning.
    #[serde(default = "one")]
    pub am_weight: f64,
    #[serde(default = "four")]
    pub temperature: f64,
    /// Weight of hard-label cross-entropy inside the KD term.
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

fn half() -> f64 {
    0.5
}

impl NonnTrainConfig {
    pub fn new(epochs: usize, batch_size: usize, sgd: SgdConfig, seed: u64) -> Self {
        NonnTrainConfig {
            student_epochs: epochs,
            fusion_epochs: epochs,
            finetune_epochs: epochs,
            batch_size,
            sgd,
            am_weight: 1.0,
            temperature: 4.0,
            alpha: 0.5,
            seed,
        }
    }

    fn kd(&self) -> LossSpec {
        LossSpec::Kd {
            temperature: self.temperature,
            alpha: self.alpha,
        }
    }

    fn train(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            sgd: self.sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonnReport {
    /// Per student, mean activation-matching loss of every phase-1 epoch.
    pub student_losses: Vec<Vec<f64>>,
    pub fusion_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub param_count: usize,
    pub test_accuracy: Option<f64>,
    pub test_macro_f1: Option<f64>,
}

/// Columns `filters` of an `n x F` matrix.
fn columns(t: &Tensor, filters: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.batch() * filters.len());
    for row in t.rows() {
        data.extend(filters.iter().map(|&f| row[f]));
    }
    Tensor::new(vec![t.batch(), filters.len()], data)
}

fn concat_features(parts: &[Tensor]) -> Result<Tensor> {
    let n = parts.first().map_or(0, Tensor::batch);
    let width: usize = parts.iter().map(Tensor::item_len).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor::new(vec![n, width], data)
}

/// Trains every student on its own slice of the teacher's filter
/// importances (in parallel; students never see each other), then the
/// fusion layer on the frozen concatenated features with KD against the
/// teacher, then optionally the whole ensemble end to end with the fused KD
/// loss plus `am_weight` times each student's activation match.
pub fn train_students(
    teacher: &Model,
    spec: &StudentEnsembleSpec,
    train: &LabeledDataset,
    cfg: &NonnTrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<(Ensemble, NonnReport)> {
    cfg.kd().validate()?;
    cfg.sgd.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if train.classes != spec.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, ensemble predicts {}",
            train.classes, spec.classes
        )));
    }
    let mut ens = Ensemble::init(spec, cfg.seed)?;
    let importances = filter_importances(teacher, &train.inputs, &spec.teacher_layer)?;
    if importances.item_len() != spec.filter_count {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.filter_count],
            actual: vec![importances.item_len()],
        });
    }
    let targets: Vec<Tensor> = spec
        .students
        .iter()
        .map(|p| columns(&importances, &p.filters))
        .collect::<Result<_>>()?;
    let am = LossSpec::ActivationMatch {
        layer: FEATURE_LAYER.to_string(),
    };

    let student_losses: Vec<Vec<f64>> = ens
        .students
        .par_iter_mut()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(s, (model, target))| {
            let data = TrainData {
                inputs: &train.inputs,
                labels: None,
                teacher_logits: None,
                target_activations: Some(target),
            };
            fit(model, &data, &am, &cfg.train(cfg.student_epochs), derive_seed(cfg.seed, &[1, s as u64])).map_err(|e| {
                Error::Student {
                    student: s,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;

    let teacher_logits = predict_batched(teacher, &train.inputs, 256)?;
    let features = concat_features(&student_features(&ens, &train.inputs)?)?;
    let fusion_data = TrainData {
        inputs: &features,
        labels: Some(&train.labels),
        teacher_logits: Some(&teacher_logits),
        target_activations: None,
    };
    let fusion_losses = fit(&mut ens.fusion, &fusion_data, &cfg.kd(), &cfg.train(cfg.fusion_epochs), derive_seed(cfg.seed, &[2]))?;

    let finetune_losses = finetune(&mut ens, train, &teacher_logits, &targets, cfg)?;

    let eval = test.map(|t| evaluate_ensemble(&ens, t)).transpose()?;
    let report = NonnReport {
        student_losses,
        fusion_losses,
        finetune_losses,
        param_count: ens.param_count(),
        test_accuracy: eval.map(|e| e.0),
        test_macro_f1: eval.map(|e| e.1),
    };
    Ok((ens, report))
}

fn finetune(ens: &mut Ensemble, train: &LabeledDataset, teacher_logits: &Tensor, targets: &[Tensor], cfg: &NonnTrainConfig) -> Result<Vec<f64>> {
    let kd = cfg.kd();
    let am = LossSpec::ActivationMatch {
        layer: FEATURE_LAYER.to_string(),
    };
    let capture: BTreeSet<String> = [FEATURE_LAYER.to_string()].into();
    let none = BTreeSet::new();
    let n = train.len();
    let mut states: Vec<SgdState> = vec![SgdState::default(); ens.len()];
    let mut fusion_state = SgdState::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 0..cfg.finetune_epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, &[3, epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = train.inputs.select(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let t_logits = teacher_logits.select(idx);
            let fwds = ens
                .students
                .par_iter()
                .map(|m| m.forward(&x, &capture))
                .collect::<Result<Vec<_>>>()?;
            let feats: Vec<Tensor> = fwds.iter().map(|f| f.outputs.clone()).collect();
            let fused_in = concat_features(&feats)?;
            let ffwd = ens.fusion.forward(&fused_in, &none)?;
            let klg = loss_and_grad(&kd, &ffwd.outputs, &ffwd.captured, Targets {
                labels: Some(&labels),
                teacher_logits: Some(&t_logits),
                activations: None,
            })?;
            let fgrads = ens.fusion.backward(&ffwd.tape, &klg.seed)?;
            let mut value = klg.value;
            let mut offset = 0;
            let mut updates = Vec::with_capacity(ens.len());
            for (s, fwd) in fwds.iter().enumerate() {
                let width = feats[s].item_len();
                let target = targets[s].select(idx);
                let alg = loss_and_grad(&am, &fwd.outputs, &fwd.captured, Targets::activations(&target))?;
                value += cfg.am_weight * alg.value;
                let am_grad = alg
                    .seed
                    .captured
                    .get(FEATURE_LAYER)
                    .ok_or_else(|| Error::MissingCapture(FEATURE_LAYER.to_string()))?;
                let mut g = Vec::with_capacity(idx.len() * width);
                for i in 0..idx.len() {
                    let from_fusion = &fgrads.input.item(i)[offset..offset + width];
                    g.extend(from_fusion.iter().zip(am_grad.item(i)).map(|(a, b)| a + cfg.am_weight * b));
                }
                offset += width;
                let seed = OutputGrads {
                    outputs: Some(Tensor::new(feats[s].shape().to_vec(), g)?),
                    captured: Default::default(),
                };
                updates.push(seed);
            }
            let grads: Vec<Vec<f64>> = ens
                .students
                .par_iter()
                .zip(fwds.par_iter().zip(updates.par_iter()))
                .enumerate()
                .map(|(s, (m, (fwd, seed)))| {
                    m.backward(&fwd.tape, seed).map(|g| g.params).map_err(|e| Error::Student {
                        student: s,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<_>>()?;
            for (s, ((m, g), st)) in ens.students.iter_mut().zip(&grads).zip(states.iter_mut()).enumerate() {
                sgd_step(m, g, &cfg.sgd, st).map_err(|e| Error::Student {
                    student: s,
                    source: Box::new(e),
                })?;
            }
            sgd_step(&mut ens.fusion, &fgrads.params, &cfg.sgd, &mut fusion_state)?;
            if !value.is_finite() {
                return Err(Error::NonFinite("ensemble loss".into()));
            }
            total += value * idx.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Each student's features over `inputs`, in fusion order.
pub fn student_features(ens: &Ensemble, inputs: &Tensor) -> Result<Vec<Tensor>> {
    ens.students
        .par_iter()
        .map(|m| predict_batched(m, inputs, 256))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    /// Per student, `n x filters_s`.
    pub features: Vec<Tensor>,
    /// Bytes one sample's features occupy on the way to the fusion layer.
    pub feature_bytes_per_sample: usize,
}

/// Every student sees the raw input on its own; only their feature vectors
/// meet, at the fusion layer.
pub fn ensemble_infer(ens: &Ensemble, inputs: &Tensor) -> Result<EnsembleOutput> {
    let features = student_features(ens, inputs)?;
    fuse(ens, features)
}

/// Like [`ensemble_infer`] with a separate copy of the input per student, as
/// when every student runs on its own device.
pub fn ensemble_infer_each(ens: &Ensemble, inputs: &[Tensor]) -> Result<EnsembleOutput> {
    if inputs.len() != ens.len() {
        return Err(Error::LengthMismatch {
            expected: ens.len(),
            actual: inputs.len(),
        });
    }
    let features = ens
        .students
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(m, x)| predict_batched(m, x, 256))
        .collect::<Result<Vec<_>>>()?;
    fuse(ens, features)
}

/// Fusion over features computed elsewhere (one tensor per student).
pub fn fuse(ens: &Ensemble, features: Vec<Tensor>) -> Result<EnsembleOutput> {
    if features.len() != ens.len() {
        return Err(Error::LengthMismatch {
            expected: ens.len(),
            actual: features.len(),
        });
    }
    let logits = predict_batched(&ens.fusion, &concat_features(&features)?, 256)?;
    let feature_bytes_per_sample = features.iter().map(|f| f.item_len() * 8).sum();
    Ok(EnsembleOutput {
        predictions: logits.argmax_rows(),
        logits,
        features,
        feature_bytes_per_sample,
    })
}

/// `(accuracy, macro F1)` of the fused prediction.
pub fn evaluate_ensemble(ens: &Ensemble, test: &LabeledDataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let out = ensemble_infer(ens, &test.inputs)?;
    let correct = out.predictions.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok((
        correct as f64 / test.len() as f64,
        macro_f1(&out.predictions, &test.labels, test.classes),
    ))
}
