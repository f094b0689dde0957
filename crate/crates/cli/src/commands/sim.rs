//! `topology`, `sim` and `compare`.

use std::path::{Path, PathBuf};

use edgeflow::distsim::{
    calibrated_device, compare as speedups, format_speedup, plan_nonn_placement, plan_split_placement, simulate as run_sim,
    wired_link, LinkSpec, Placement, PlacementConfig, SimReport, Topology,
};
use edgeflow::nn::{count_flops, ModelSpec};
use edgeflow::nonn::StudentEnsembleSpec;

use super::Ctx;
use crate::args::{CompareArgs, LinkPreset, SimArgs, TopologyArgs};
use crate::{CliError, CliResult};

fn input<T>(path: &Path, load: impl FnOnce(&Path) -> edgeflow::Result<T>) -> CliResult<T> {
    load(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub(super) fn topology(ctx: &Ctx, a: &TopologyArgs) -> CliResult<()> {
    if a.devices == 0 || a.memory == 0 {
        return Err(CliError::Invalid("--devices and --memory must be positive".into()));
    }
    let spec = input(&a.teacher, ModelSpec::load)?;
    let flops = count_flops(&spec, 1)?;
    let link = match a.link {
        LinkPreset::Wired => wired_link(),
        LinkPreset::Ideal => LinkSpec {
            bandwidth: f64::INFINITY,
            latency: 0.0,
            transfer_energy: 0.0,
            ..wired_link()
        },
    };
    let topo = Topology::fully_connected(a.devices, &calibrated_device(flops, a.memory), &link)?;
    let outputs = ctx.start::<()>(&a.out, None, vec![a.teacher.clone()], ctx.seed(None)?)?;
    println!(
        "{} devices at {:.4e} FLOP/s ({} FLOPs per teacher inference)",
        a.devices, topo.devices[0].compute_rate, flops
    );
    outputs.write("topology.json", topo.to_json() + "\n")?;
    Ok(())
}

pub(super) fn simulate(ctx: &Ctx, a: &SimArgs) -> CliResult<()> {
    let topo = input(&a.topology, Topology::load)?;
    let cfg = PlacementConfig {
        bytes_per_param: a.bytes_per_param,
        bytes_per_value: a.bytes_per_value,
    };
    let mut inputs = vec![a.topology.clone()];
    let (placement, planned) = match (&a.placement, &a.ensemble, &a.model) {
        (Some(p), None, None) => {
            inputs.push(p.clone());
            (input(p, Placement::load)?, false)
        }
        (None, Some(e), None) => {
            inputs.push(e.clone());
            let spec = input(e, StudentEnsembleSpec::load)?;
            (plan_nonn_placement(&spec, &topo, &cfg)?, true)
        }
        (None, None, Some(m)) => {
            inputs.push(m.clone());
            let spec = input(m, ModelSpec::load)?;
            let shards = a.shards.unwrap_or(1);
            (plan_split_placement(&spec, &topo, shards, &cfg)?, true)
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --placement, --ensemble or --model".into(),
            ))
        }
    };
    let outputs = ctx.start::<()>(&a.out, None, inputs, ctx.seed(None)?)?;
    if planned {
        outputs.write("placement.json", placement.to_json() + "\n")?;
    }
    let report = run_sim(&placement, &topo)?;
    println!(
        "latency {:.6} s (compute {:.6} s, communication {:.6} s), {} bytes, {:.6} J",
        report.latency, report.compute_time, report.comm_time, report.total_bytes, report.energy
    );
    outputs.write("report.json", report.to_json() + "\n")?;
    outputs.write("report.csv", report.to_csv())?;
    Ok(())
}

pub(super) fn compare(ctx: &Ctx, a: &CompareArgs) -> CliResult<()> {
    if a.reports.len() < 2 {
        return Err(CliError::Invalid(format!(
            "compare needs at least 2 --report NAME=FILE entries, got {}",
            a.reports.len()
        )));
    }
    let mut named = Vec::new();
    let mut inputs: Vec<PathBuf> = Vec::new();
    for entry in &a.reports {
        let (name, path) = match entry.split_once('=') {
            Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
            _ => (entry.clone(), PathBuf::from(entry)),
        };
        if named.iter().any(|(n, _): &(String, SimReport)| *n == name) {
            return Err(CliError::Invalid(format!("report name `{name}` given twice")));
        }
        named.push((name, input(&path, SimReport::load)?));
        inputs.push(path);
    }
    let table = speedups(&named)?;
    let outputs = ctx.start::<()>(&a.out, None, inputs, ctx.seed(None)?)?;
    for r in &table.rows {
        println!(
            "{} vs {}: latency {}, energy {}",
            r.candidate,
            r.baseline,
            format_speedup(r.latency),
            format_speedup(r.energy)
        );
    }
    outputs.write("speedup.csv", table.to_csv())?;
    outputs.write("speedup.json", table.to_json() + "\n")?;
    Ok(())
}
