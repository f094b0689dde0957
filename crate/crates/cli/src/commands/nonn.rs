//! `nonn graph|partition|train|infer`.

use std::path::{Path, PathBuf};

use edgeflow::io::load_model;
use edgeflow::nn::{count_flops, Model, SgdConfig};
use edgeflow::nonn::{
    build_filter_graph, ensemble_infer, louvain, make_partitions, train_students, EdgeRule, Ensemble, EnsembleConfig,
    FilterGraph, NonnReport, NonnTrainConfig, StudentEnsembleSpec, StudentTemplate,
};
use edgeflow::rng::derive_seed;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::args::{NonnCommand, RunArgs};
use crate::config::{load_config, section, DataConfig, Loaded, TRAIN_STREAM};
use crate::manifest::{dir_files, with_blob};
use crate::{CliError, CliResult};

const LOUVAIN_STREAM: u64 = 20;

fn resolution() -> f64 {
    1.0
}
fn max_width() -> f64 {
    4.0
}
fn batch() -> usize {
    32
}
fn one() -> f64 {
    1.0
}
fn temperature() -> f64 {
    4.0
}
fn half() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphSection {
    /// Defaults to the teacher's last convolution.
    layer: Option<String>,
    #[serde(default)]
    rule: EdgeRule,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    #[serde(default = "resolution")]
    resolution: f64,
    students: usize,
    /// Parameter budget per student.
    budget: usize,
    template: StudentTemplate,
    #[serde(default = "max_width")]
    max_width: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    student_epochs: usize,
    fusion_epochs: usize,
    #[serde(default)]
    finetune_epochs: usize,
    #[serde(default = "batch")]
    batch_size: usize,
    lr: f64,
    #[serde(default)]
    momentum: f64,
    #[serde(default)]
    weight_decay: f64,
    #[serde(default = "one")]
    am_weight: f64,
    #[serde(default = "temperature")]
    temperature: f64,
    #[serde(default = "half")]
    alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NonnFile {
    seed: Option<u64>,
    data: Option<DataConfig>,
    graph: Option<GraphSection>,
    partition: Option<PartitionSection>,
    train: Option<TrainSection>,
}

fn input<T>(path: &Path, load: impl FnOnce(&Path) -> edgeflow::Result<T>) -> CliResult<T> {
    load(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

fn teacher(path: &Path) -> CliResult<Model> {
    input(path, load_model)
}

pub(super) fn run(ctx: &Ctx, n: &NonnCommand) -> CliResult<()> {
    match n {
        NonnCommand::Graph { run, teacher } => graph(ctx, run, teacher),
        NonnCommand::Partition { run, graph, teacher } => partition(ctx, run, graph, teacher),
        NonnCommand::Train { run, teacher, ensemble } => train(ctx, run, teacher, ensemble),
        NonnCommand::Infer { run, ensemble_dir } => infer(ctx, run, ensemble_dir),
    }
}

fn graph(ctx: &Ctx, a: &RunArgs, teacher_path: &Path) -> CliResult<()> {
    let cfg: Loaded<NonnFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let data_cfg = section(&cfg, &f.data, "data")?;
    let g = section(&cfg, &f.graph, "graph")?;
    let seed = ctx.seed(f.seed)?;
    let model = teacher(teacher_path)?;
    let data = data_cfg.load(cfg.base(), seed.0)?;
    let inputs: Vec<PathBuf> = with_blob(teacher_path)
        .into_iter()
        .chain(data_cfg.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let graph = build_filter_graph(&model, &data.train, g.layer.as_deref(), g.rule)?;
    println!(
        "{} filters at `{}`, {} edges, total weight {}",
        graph.nodes,
        graph.layer,
        graph.edges.len(),
        graph.total_weight()
    );
    outputs.write("graph.json", graph.to_json() + "\n")?;
    outputs.write("graph.csv", graph.to_csv())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct StudentLine {
    student: usize,
    filters: usize,
    importance: f64,
    width: f64,
    params: usize,
    flops: u64,
}

#[derive(Debug, Serialize)]
struct PartitionSummary {
    seed: u64,
    communities: usize,
    modularity: f64,
    budget: usize,
    students: Vec<StudentLine>,
}

fn partition(ctx: &Ctx, a: &RunArgs, graph_path: &Path, teacher_path: &Path) -> CliResult<()> {
    let cfg: Loaded<NonnFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let p = section(&cfg, &f.partition, "partition")?;
    let seed = ctx.seed(f.seed)?;
    let graph = input(graph_path, FilterGraph::load)?;
    let model = teacher(teacher_path)?;
    if !(p.resolution > 0.0 && p.resolution.is_finite()) {
        return Err(CliError::Invalid(format!("[partition]: resolution must be positive, got {}", p.resolution)));
    }
    let inputs: Vec<PathBuf> = [graph_path.to_path_buf()].into_iter().chain(with_blob(teacher_path)).collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let communities = louvain(&graph, p.resolution, derive_seed(seed.0, &[LOUVAIN_STREAM]))?;
    let ens_cfg = EnsembleConfig {
        students: p.students,
        budget: p.budget,
        template: p.template.clone(),
        max_width: p.max_width,
    };
    let spec = make_partitions(&graph, &communities, model.input_shape(), &ens_cfg)?;
    let students = spec
        .students
        .iter()
        .enumerate()
        .map(|(s, st)| {
            Ok(StudentLine {
                student: s,
                filters: st.filters.len(),
                importance: st.importance,
                width: st.width,
                params: st.params,
                flops: count_flops(&st.spec, 1)?,
            })
        })
        .collect::<edgeflow::Result<Vec<_>>>()?;
    println!(
        "{} communities (modularity {:.4}) grouped into {} students",
        communities.communities.len(),
        communities.modularity,
        students.len()
    );
    for s in &students {
        println!(
            "  student {}: {} filters, {} params (budget {})",
            s.student, s.filters, s.params, p.budget
        );
    }
    outputs.write_json("communities.json", &communities)?;
    spec.save(&outputs.path("ensemble.json"))?;
    outputs.write_json(
        "partition.json",
        &PartitionSummary {
            seed: seed.0,
            communities: communities.communities.len(),
            modularity: communities.modularity,
            budget: p.budget,
            students,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    #[serde(flatten)]
    report: NonnReport,
    teacher_test_accuracy: f64,
}

fn train(ctx: &Ctx, a: &RunArgs, teacher_path: &Path, ensemble_path: &Path) -> CliResult<()> {
    let cfg: Loaded<NonnFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let data_cfg = section(&cfg, &f.data, "data")?;
    let t = section(&cfg, &f.train, "train")?;
    let seed = ctx.seed(f.seed)?;
    let model = teacher(teacher_path)?;
    let spec = input(ensemble_path, StudentEnsembleSpec::load)?;
    let sgd = SgdConfig {
        lr: t.lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    };
    sgd.validate().map_err(|e| CliError::Invalid(format!("[train]: {e}")))?;
    if t.batch_size == 0 {
        return Err(CliError::Invalid("[train]: batch_size must be positive".into()));
    }
    let train_cfg = NonnTrainConfig {
        student_epochs: t.student_epochs,
        fusion_epochs: t.fusion_epochs,
        finetune_epochs: t.finetune_epochs,
        batch_size: t.batch_size,
        sgd,
        am_weight: t.am_weight,
        temperature: t.temperature,
        alpha: t.alpha,
        seed: derive_seed(seed.0, &[TRAIN_STREAM]),
    };
    let data = data_cfg.load(cfg.base(), seed.0)?;
    let inputs: Vec<PathBuf> = with_blob(teacher_path)
        .into_iter()
        .chain([ensemble_path.to_path_buf()])
        .chain(data_cfg.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let (ens, report) = train_students(&model, &spec, &data.train, &train_cfg, Some(&data.test))?;
    let teacher_acc = edgeflow::fed::evaluate(&model, &data.test)?.accuracy;
    if let Some(acc) = report.test_accuracy {
        println!(
            "{} students, {} parameters: ensemble accuracy {acc:.4} (teacher {teacher_acc:.4})",
            ens.len(),
            report.param_count
        );
    }
    ens.save(outputs.dir())?;
    outputs.write_json(
        "report.json",
        &TrainSummary {
            seed: seed.0,
            report,
            teacher_test_accuracy: teacher_acc,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferSummary {
    seed: u64,
    samples: usize,
    accuracy: f64,
    feature_dims: Vec<usize>,
    feature_bytes_per_sample: usize,
}

fn infer(ctx: &Ctx, a: &RunArgs, dir: &Path) -> CliResult<()> {
    let cfg: Loaded<NonnFile> = load_config(&a.config)?;
    let f = &cfg.value;
    let data_cfg = section(&cfg, &f.data, "data")?;
    let seed = ctx.seed(f.seed)?;
    let ens = input(dir, Ensemble::load)?;
    let data = data_cfg.load(cfg.base(), seed.0)?;
    let inputs: Vec<PathBuf> = dir_files(dir)
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .chain(data_cfg.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let out = ensemble_infer(&ens, &data.test.inputs)?;
    let correct = out.predictions.iter().zip(&data.test.labels).filter(|(p, l)| p == l).count();
    let summary = InferSummary {
        seed: seed.0,
        samples: data.test.len(),
        accuracy: correct as f64 / data.test.len().max(1) as f64,
        feature_dims: out.features.iter().map(|t| t.item_len()).collect(),
        feature_bytes_per_sample: out.feature_bytes_per_sample,
    };
    println!(
        "{} samples, accuracy {:.4}, {} feature bytes per sample",
        summary.samples, summary.accuracy, summary.feature_bytes_per_sample
    );
    let mut csv = String::from("sample,label,prediction\n");
    for (i, (l, p)) in data.test.labels.iter().zip(&out.predictions).enumerate() {
        csv.push_str(&format!("{i},{l},{p}\n"));
    }
    outputs.write("predictions.csv", csv)?;
    outputs.write_json("infer.json", &summary)?;
    Ok(())
}
