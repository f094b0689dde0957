//! `count`, `zoo` and `train`.

use std::path::PathBuf;

use edgeflow::fed::evaluate;
use edgeflow::io::save_model;
use edgeflow::nn::{
    build_model, count_flops, count_params, fit, per_layer_flops, per_layer_params, zoo as arch, LossSpec, ModelSpec,
    SgdConfig, TrainConfig, TrainData,
};
use edgeflow::rng::derive_seed;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::args::{CountArgs, RunArgs, ZooCommand};
use crate::config::{load_config, DataConfig, ModelSource, INIT_STREAM, TRAIN_STREAM};
use crate::{CliError, CliResult};

fn si(v: f64) -> String {
    match v {
        v if v >= 1e9 => format!("{:.2}G", v / 1e9),
        v if v >= 1e6 => format!("{:.2}M", v / 1e6),
        v if v >= 1e3 => format!("{:.2}K", v / 1e3),
        v => format!("{v}"),
    }
}

#[derive(Debug, Serialize)]
struct LayerCount {
    id: String,
    kind: &'static str,
    params: usize,
    flops: u64,
}

#[derive(Debug, Serialize)]
struct Counts {
    model: String,
    batch: usize,
    params: usize,
    flops: u64,
    layers: Vec<LayerCount>,
}

pub(super) fn count(ctx: &Ctx, a: &CountArgs) -> CliResult<()> {
    if a.batch == 0 {
        return Err(CliError::Invalid("--batch must be at least 1".into()));
    }
    let spec = ModelSpec::load(&a.model).map_err(|source| CliError::Input {
        path: a.model.clone(),
        source,
    })?;
    let params = count_params(&spec)?;
    let flops = count_flops(&spec, a.batch)?;
    let layers: Vec<LayerCount> = spec
        .layers
        .iter()
        .zip(per_layer_params(&spec)?)
        .zip(per_layer_flops(&spec)?)
        .map(|((l, p), f)| LayerCount {
            id: l.id.clone(),
            kind: l.kind.name(),
            params: p,
            flops: f * a.batch as u64,
        })
        .collect();

    println!("model: {}", a.model.display());
    println!("params: {params} ({})", si(params as f64));
    println!("flops: {flops} ({}) at batch {}", si(flops as f64), a.batch);
    if a.per_layer {
        println!("{:<24} {:<16} {:>12} {:>16}", "layer", "kind", "params", "flops");
        for l in &layers {
            println!("{:<24} {:<16} {:>12} {:>16}", l.id, l.kind, l.params, l.flops);
        }
    }
    if let Some(out) = &a.out {
        let outputs = ctx.start::<()>(out, None, vec![a.model.clone()], ctx.seed(None)?)?;
        outputs.write_json(
            "counts.json",
            &Counts {
                model: a.model.display().to_string(),
                batch: a.batch,
                params,
                flops,
                layers,
            },
        )?;
    }
    Ok(())
}

pub(super) fn zoo(z: &ZooCommand) -> CliResult<()> {
    let spec = match z {
        ZooCommand::Wrn { depth, widen, classes } => {
            if *depth < 10 || (depth - 4) % 6 != 0 || *widen == 0 || *classes == 0 {
                return Err(CliError::Invalid(format!(
                    "wrn needs depth 6n+4 (at least 10), widen and classes positive; got {depth}, {widen}, {classes}"
                )));
            }
            arch::wrn(*depth, *widen, *classes)
        }
        ZooCommand::Mlp { inputs, hidden, classes } => arch::mlp(*inputs, hidden, *classes),
        ZooCommand::Cnn {
            input,
            channels,
            kernel,
            padding,
            classes,
        } => arch::small_cnn([input[0], input[1], input[2]], channels, *kernel, *padding, *classes),
    };
    spec.plan().map_err(|e| CliError::Invalid(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&spec).expect("spec serializes"));
    Ok(())
}

fn default_batch() -> usize {
    32
}

/// Flat `[train]` table.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn config(&self) -> CliResult<TrainConfig> {
        let sgd = SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        sgd.validate().map_err(|e| CliError::Invalid(format!("[train]: {e}")))?;
        if self.batch_size == 0 {
            return Err(CliError::Invalid("[train]: batch_size must be positive".into()));
        }
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    seed: Option<u64>,
    model: ModelSource,
    data: DataConfig,
    train: TrainSection,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    seed: u64,
    param_count: usize,
    flops: u64,
    epoch_losses: Vec<f64>,
    train_accuracy: f64,
    test_accuracy: f64,
    test_macro_f1: f64,
    test_loss: f64,
}

pub(super) fn train(ctx: &Ctx, a: &RunArgs) -> CliResult<()> {
    let cfg = load_config::<TrainFile>(&a.config)?;
    let f = &cfg.value;
    let seed = ctx.seed(f.seed)?;
    let train_cfg = f.train.config()?;
    let data = f.data.load(cfg.base(), seed.0)?;
    let spec = f
        .model
        .build(cfg.base(), data.train.feature_shape(), data.train.classes)?;
    let inputs: Vec<PathBuf> = f
        .data
        .input_paths(cfg.base())
        .into_iter()
        .chain(f.model.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;

    let mut model = build_model(&spec, derive_seed(seed.0, &[INIT_STREAM]))?;
    let losses = fit(
        &mut model,
        &TrainData::labeled(&data.train.inputs, &data.train.labels),
        &LossSpec::CrossEntropy,
        &train_cfg,
        derive_seed(seed.0, &[TRAIN_STREAM]),
    )?;
    let on_train = evaluate(&model, &data.train)?;
    let on_test = evaluate(&model, &data.test)?;
    println!(
        "trained {} parameters: train accuracy {:.4}, test accuracy {:.4}",
        model.param_count(),
        on_train.accuracy,
        on_test.accuracy
    );
    save_model(&model, outputs.dir(), "model")?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    outputs.write("losses.csv", csv)?;
    outputs.write_json(
        "report.json",
        &TrainReport {
            seed: seed.0,
            param_count: model.param_count(),
            flops: count_flops(&spec, 1)?,
            epoch_losses: losses,
            train_accuracy: on_train.accuracy,
            test_accuracy: on_test.accuracy,
            test_macro_f1: on_test.macro_f1,
            test_loss: on_test.loss,
        },
    )?;
    Ok(())
}
