//! `fed`: one federated run and its round ledger.

use std::path::PathBuf;

use edgeflow::datasets::{partition_dirichlet, partition_shards};
use edgeflow::fed::{run_federated, FedConfig, FedSummary};
use edgeflow::io::save_model;
use edgeflow::nn::{build_model, LossSpec};
use edgeflow::rng::derive_seed;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::args::RunArgs;
use crate::config::{load_config, DataConfig, ModelSource, INIT_STREAM, PARTITION_STREAM};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PartitionSection {
    Dirichlet { alpha: f64 },
    Shards { shards_per_client: usize },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FedFile {
    seed: Option<u64>,
    model: ModelSource,
    data: DataConfig,
    partition: PartitionSection,
    fed: FedConfig,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    seed: u64,
    loss: &'a LossSpec,
    clients: usize,
    selected_per_round: usize,
    #[serde(flatten)]
    summary: FedSummary,
    closed_form_bytes: u64,
}

pub(super) fn run(ctx: &Ctx, a: &RunArgs) -> CliResult<()> {
    let cfg = load_config::<FedFile>(&a.config)?;
    let f = &cfg.value;
    let seed = ctx.seed(f.seed)?;
    if f.fed.seed != 0 {
        return Err(CliError::Config {
            path: cfg.path.clone(),
            message: "[fed] takes no `seed`; set the top-level `seed`".into(),
        });
    }
    let fed = FedConfig {
        seed: seed.0,
        ..f.fed.clone()
    };
    fed.validate().map_err(|e| CliError::Invalid(format!("[fed]: {e}")))?;

    let data = f.data.load(cfg.base(), seed.0)?;
    let spec = f.model.build(cfg.base(), data.train.feature_shape(), data.train.classes)?;
    let part_seed = derive_seed(seed.0, &[PARTITION_STREAM]);
    let partition = match f.partition {
        PartitionSection::Dirichlet { alpha } => partition_dirichlet(&data.train, fed.clients, alpha, part_seed),
        PartitionSection::Shards { shards_per_client } => {
            partition_shards(&data.train, fed.clients, shards_per_client, part_seed)
        }
    }
    .map_err(|e| CliError::Invalid(format!("[partition]: {e}")))?;

    let inputs: Vec<PathBuf> = f
        .data
        .input_paths(cfg.base())
        .into_iter()
        .chain(f.model.input_paths(cfg.base()))
        .collect();
    let outputs = ctx.start(&a.out, Some(&cfg), inputs, seed)?;
    outputs.write("partition.json", partition.to_json() + "\n")?;

    let init = build_model(&spec, derive_seed(seed.0, &[INIT_STREAM]))?;
    let report = run_federated(&fed, &init, &partition, &data.train, &data.test)?;
    outputs.write("rounds.jsonl", report.to_jsonl())?;
    outputs.write("rounds.csv", report.to_csv())?;
    let summary = report.summary();
    if let Some(acc) = summary.final_accuracy {
        println!(
            "{} rounds, {} bytes exchanged, final accuracy {:.4}",
            summary.rounds, summary.total_bytes, acc
        );
    }
    outputs.write_json(
        "summary.json",
        &Summary {
            seed: seed.0,
            loss: &fed.loss,
            clients: fed.clients,
            selected_per_round: fed.selected_per_round(),
            closed_form_bytes: fed.expected_total_bytes(report.param_count),
            summary,
        },
    )?;
    if let Some(model) = &report.final_model {
        save_model(model, outputs.dir(), "model")?;
    }
    Ok(())
}
