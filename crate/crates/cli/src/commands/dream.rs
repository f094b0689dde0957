//! `dream extract|generate|distill`.

use std::path::{Path, PathBuf};

use edgeflow::dream::{
    avgpool_layer, distill, extract_metadata, generate_dreams, generate_targets, Components, DistillReport, DreamBatch,
    DreamConfig, DreamInit, ExtractConfig, Metadata,
};
use edgeflow::fed::evaluate;
use edgeflow::io::{load_model, save_model};
use edgeflow::nn::{LossSpec, Model, SgdConfig, TrainConfig};
use edgeflow::rng::derive_seed;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::args::{DreamCommand, RunArgs};
use crate::config::{load_config, section, DataConfig, Loaded, ModelSource, TRAIN_STREAM};
use crate::manifest::with_blob;
use crate::{CliError, CliResult};

const EXTRACT_STREAM: u64 = 10;
const TARGET_STREAM: u64 = 11;
const DREAM_STREAM: u64 = 12;
const CONVERGED: f64 = 0.1;

fn fraction() -> f64 {
    0.1
}
fn k() -> usize {
    3
}
fn noise_scale() -> f64 {
    0.5
}
fn steps() -> usize {
    500
}
fn dream_lr() -> f64 {
    0.1
}
fn init_std() -> f64 {
    0.1
}
fn tol() -> f64 {
    1e-3
}
fn temperature() -> f64 {
    4.0
}
fn batch() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractSection {
    /// Defaults to the teacher's global average pool.
    layer: Option<String>,
    #[serde(default = "fraction")]
    fraction: f64,
    #[serde(default = "k")]
    k: usize,
    /// Principal components per cluster; by default enough for 95% of the
    /// variance, at most 10.
    components: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSection {
    n_per_cluster: usize,
    #[serde(default = "noise_scale")]
    noise_scale: f64,
    #[serde(default = "steps")]
    steps: usize,
    #[serde(default = "dream_lr")]
    lr: f64,
    /// Standard deviation of the starting noise; 0 starts from zeros.
    #[serde(default = "init_std")]
    init_std: f64,
    clamp: Option<[f64; 2]>,
    #[serde(default = "tol")]
    tol: f64,
    #[serde(default)]
    input_l2: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillSection {
    student: ModelSource,
    #[serde(default = "temperature")]
    temperature: f64,
    epochs: usize,
    #[serde(default = "batch")]
    batch_size: usize,
    lr: f64,
    #[serde(default)]
    momentum: f64,
    #[serde(default)]
    weight_decay: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DreamFile {
    seed: Option<u64>,
    data: Option<DataConfig>,
    extract: Option<ExtractSection>,
    generate: Option<GenerateSection>,
    distill: Option<DistillSection>,
}

fn teacher(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub(super) fn run(ctx: &Ctx, d: &DreamCommand) -> CliResult<()> {
    match d {
        DreamCommand::Extract { run, teacher } => extract(ctx, run, teacher),
        DreamCommand::Generate { run, teacher, metadata } => generate(ctx, run, teacher, metadata),
        DreamCommand::Distill { run, teacher, dreams } => distill_cmd(ctx, run, teacher, dreams),
    }
}

#[derive(Debug, Serialize)]
struct ExtractSummary {
    seed: u64,
    layer: String,
    dim: usize,
    clusters: usize,
    clustered_samples: usize,
    stored_vectors_per_class: Vec<usize>,
}

fn extract(ctx: &Ctx, a: &RunArgs, teacher_path: &Path) -> CliResult<()> {
    let cfg: Loaded<DreamFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let data_cfg = section(&cfg, &f.data, "data")?;
    let ex = section(&cfg, &f.extract, "extract")?;
    let seed = ctx.seed(f.seed)?;
    let model = teacher(teacher_path)?;
    let layer = match &ex.layer {
        Some(l) => l.clone(),
        None => avgpool_layer(&model)
            .ok_or_else(|| CliError::Invalid("teacher has no global average pool; set [extract] layer".into()))?,
    };
    let data = data_cfg.load(cfg.base(), seed.0)?;
    let inputs: Vec<PathBuf> = with_blob(teacher_path)
        .into_iter()
        .chain(data_cfg.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let extract_cfg = ExtractConfig {
        fraction: ex.fraction,
        k: ex.k,
        components: ex.components.map_or(Components::Auto, Components::Fixed),
        seed: derive_seed(seed.0, &[EXTRACT_STREAM]),
    };
    let meta = extract_metadata(&model, &data.train, &layer, &extract_cfg)?;
    println!(
        "{} clusters over {} classes at `{}` ({} values each)",
        meta.clusters.len(),
        meta.classes,
        meta.layer,
        meta.dim
    );
    outputs.write("metadata.json", meta.to_json() + "\n")?;
    outputs.write_json(
        "extract.json",
        &ExtractSummary {
            seed: seed.0,
            layer: meta.layer.clone(),
            dim: meta.dim,
            clusters: meta.clusters.len(),
            clustered_samples: meta.total_clustered(),
            stored_vectors_per_class: meta.stored_vectors_per_class(),
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GenerateSummary {
    seed: u64,
    samples: usize,
    /// Share of samples with relative activation residual below 0.1.
    converged_fraction: f64,
    mean_relative_residual: f64,
    max_relative_residual: f64,
}

fn generate(ctx: &Ctx, a: &RunArgs, teacher_path: &Path, meta_path: &Path) -> CliResult<()> {
    let cfg: Loaded<DreamFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let g = section(&cfg, &f.generate, "generate")?;
    let seed = ctx.seed(f.seed)?;
    let model = teacher(teacher_path)?;
    let meta = Metadata::load(meta_path).map_err(|source| CliError::Input {
        path: meta_path.to_path_buf(),
        source,
    })?;
    if !(g.noise_scale >= 0.0) || !(g.init_std >= 0.0) {
        return Err(CliError::Invalid("[generate]: noise_scale and init_std must be non-negative".into()));
    }
    let dream_cfg = DreamConfig {
        steps: g.steps,
        lr: g.lr,
        init: if g.init_std > 0.0 {
            DreamInit::Noise(g.init_std)
        } else {
            DreamInit::Zeros
        },
        clamp: match g.clamp {
            Some([lo, hi]) => Some((lo, hi)),
            None => DreamConfig::default().clamp,
        },
        tol: g.tol,
        seed: derive_seed(seed.0, &[DREAM_STREAM]),
        input_l2: g.input_l2,
    };
    let inputs: Vec<PathBuf> = with_blob(teacher_path)
        .into_iter()
        .chain([meta_path.to_path_buf()])
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let targets = generate_targets(&meta, g.n_per_cluster, g.noise_scale, derive_seed(seed.0, &[TARGET_STREAM]))?;
    let dreams = generate_dreams(&model, &meta.layer, &targets, &dream_cfg)?;
    let rel = dreams.relative_residuals();
    let n = rel.len().max(1) as f64;
    let summary = GenerateSummary {
        seed: seed.0,
        samples: dreams.len(),
        converged_fraction: rel.iter().filter(|&&r| r < CONVERGED).count() as f64 / n,
        mean_relative_residual: rel.iter().sum::<f64>() / n,
        max_relative_residual: rel.iter().copied().fold(0.0, f64::max),
    };
    println!(
        "{} dreams, {:.1}% below relative residual {CONVERGED}",
        summary.samples,
        100.0 * summary.converged_fraction
    );
    dreams.save(outputs.dir(), "dreams")?;
    let mut csv = String::from("sample,label,residual,relative_residual\n");
    for (i, ((l, r), q)) in dreams.labels.iter().zip(&dreams.residuals).zip(&rel).enumerate() {
        csv.push_str(&format!("{i},{l},{r},{q}\n"));
    }
    outputs.write("residuals.csv", csv)?;
    outputs.write_json("generate.json", &summary)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DistillSummary {
    seed: u64,
    student_params: usize,
    teacher_test_accuracy: Option<f64>,
    #[serde(flatten)]
    report: DistillReport,
}

fn distill_cmd(ctx: &Ctx, a: &RunArgs, teacher_path: &Path, dreams_path: &Path) -> CliResult<()> {
    let cfg: Loaded<DreamFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let d = section(&cfg, &f.distill, "distill")?;
    let seed = ctx.seed(f.seed)?;
    let model = teacher(teacher_path)?;
    let dreams = DreamBatch::load(dreams_path).map_err(|source| CliError::Input {
        path: dreams_path.to_path_buf(),
        source,
    })?;
    let classes = model.output_shape().iter().product();
    let student_spec = d.student.build(cfg.base(), model.input_shape(), classes)?;
    let sgd = SgdConfig {
        lr: d.lr,
        momentum: d.momentum,
        weight_decay: d.weight_decay,
    };
    sgd.validate().map_err(|e| CliError::Invalid(format!("[distill]: {e}")))?;
    if d.batch_size == 0 || !(d.temperature > 0.0) {
        return Err(CliError::Invalid("[distill]: batch_size and temperature must be positive".into()));
    }
    let test = match &f.data {
        Some(data) => Some(data.load(cfg.base(), seed.0)?.test),
        None => None,
    };
    let mut inputs: Vec<PathBuf> = with_blob(teacher_path).into_iter().chain(with_blob(dreams_path)).collect();
    inputs.extend(d.student.input_paths(cfg.base()));
    if let Some(data) = &f.data {
        inputs.extend(data.input_paths(cfg.base()));
    }
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let loss = LossSpec::Kd {
        temperature: d.temperature,
        alpha: 0.0,
    };
    let train = TrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        sgd,
    };
    let (student, report) = distill(
        &model,
        &student_spec,
        &dreams.inputs,
        &loss,
        &train,
        derive_seed(seed.0, &[TRAIN_STREAM]),
        test.as_ref(),
    )?;
    let teacher_acc = test.as_ref().map(|t| evaluate(&model, t)).transpose()?.map(|e| e.accuracy);
    if let (Some(s), Some(t)) = (report.test_accuracy, teacher_acc) {
        println!("student accuracy {s:.4} (teacher {t:.4}) from {} dreams", report.samples);
    }
    save_model(&student, outputs.dir(), "student")?;
    outputs.write_json(
        "distill.json",
        &DistillSummary {
            seed: seed.0,
            student_params: student.param_count(),
            teacher_test_accuracy: teacher_acc,
            report,
        },
    )?;
    Ok(())
}
