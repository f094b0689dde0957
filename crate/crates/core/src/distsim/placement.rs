//! Mapping model fragments onto devices, with the schedule of tensors that
//! cross links.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::topology::Topology;
use crate::error::{Error, Result};
use crate::nn::{count_flops, LayerKind, ModelSpec};
use crate::nonn::StudentEnsembleSpec;

pub const PLACEMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    Nonn,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementConfig {
    /// Storage per parameter; 1 for 8-bit quantized weights.
    #[serde(default = "one")]
    pub bytes_per_param: u64,
    /// Size of one transferred activation value.
    #[serde(default = "four")]
    pub bytes_per_value: u64,
}

fn one() -> u64 {
    1
}

fn four() -> u64 {
    4
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            bytes_per_param: 1,
            bytes_per_value: 4,
        }
    }
}

/// A piece of a model that runs on one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub id: String,
    pub device: String,
    pub param_bytes: u64,
    pub flops: u64,
    pub output_bytes: u64,
}

/// One message: `bytes` of `tensor` from one device to another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub tensor: String,
    pub from: String,
    pub to: String,
    pub bytes: u64,
}

/// Fragments that compute in parallel, then the transfers that follow them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub fragments: Vec<usize>,
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub version: u32,
    pub kind: PlacementKind,
    pub config: PlacementConfig,
    pub fragments: Vec<Fragment>,
    pub schedule: Vec<Phase>,
}

impl Placement {
    pub fn validate(&self) -> Result<()> {
        if self.version != PLACEMENT_VERSION {
            return Err(Error::Corrupt(format!("unsupported placement version {}", self.version)));
        }
        let mut seen = vec![0usize; self.fragments.len()];
        for phase in &self.schedule {
            for &f in &phase.fragments {
                *seen.get_mut(f).ok_or_else(|| {
                    Error::Corrupt(format!("phase `{}` names fragment {f} which does not exist", phase.name))
                })? += 1;
            }
        }
        if let Some(f) = seen.iter().position(|&n| n != 1) {
            return Err(Error::Corrupt(format!(
                "fragment `{}` is scheduled {} times",
                self.fragments[f].id, seen[f]
            )));
        }
        Ok(())
    }

    /// Parameter bytes resident on every device that hosts something.
    pub fn device_param_bytes(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for f in &self.fragments {
            *out.entry(f.device.clone()).or_insert(0) += f.param_bytes;
        }
        out
    }

    pub fn total_bytes(&self) -> u64 {
        self.schedule.iter().flat_map(|p| &p.transfers).map(|t| t.bytes).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.fragments.iter().map(|f| f.flops).sum()
    }

    /// Every device exists and holds at most its memory in parameters.
    pub fn check_memory(&self, topology: &Topology) -> Result<()> {
        for (id, bytes) in self.device_param_bytes() {
            let dev = topology
                .device(&id)
                .ok_or_else(|| Error::Simulation(format!("device `{id}` is not in the topology")))?;
            if bytes > dev.memory_bytes {
                return Err(Error::Infeasible(format!(
                    "device `{id}` holds {bytes} parameter bytes but has {} bytes of memory",
                    dev.memory_bytes
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Placement> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Placement = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        p.validate()?;
        Ok(p)
    }
}

/// One student per device, first-fit decreasing by parameter bytes over the
/// topology's device order. The fusion layer shares the device of student 0,
/// and every other student sends its feature vector there once.
pub fn plan_nonn_placement(ensemble: &StudentEnsembleSpec, topology: &Topology, cfg: &PlacementConfig) -> Result<Placement> {
    ensemble.validate()?;
    topology.validate()?;
    let s = ensemble.students.len();
    if topology.devices.len() < s {
        return Err(Error::Infeasible(format!(
            "{s} students need {s} devices, topology has {}",
            topology.devices.len()
        )));
    }
    let fusion_params = crate::nn::count_params(&ensemble.fusion)? as u64 * cfg.bytes_per_param;
    let need: Vec<u64> = ensemble
        .students
        .iter()
        .enumerate()
        .map(|(i, p)| p.params as u64 * cfg.bytes_per_param + if i == 0 { fusion_params } else { 0 })
        .collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| need[b].cmp(&need[a]).then(a.cmp(&b)));
    let mut used = vec![false; topology.devices.len()];
    let mut host = vec![0usize; s];
    for &st in &order {
        let slot = (0..topology.devices.len()).find(|&d| !used[d] && topology.devices[d].memory_bytes >= need[st]);
        match slot {
            Some(d) => {
                used[d] = true;
                host[st] = d;
            }
            None => {
                let largest = (0..topology.devices.len())
                    .filter(|&d| !used[d])
                    .map(|d| topology.devices[d].memory_bytes)
                    .max()
                    .unwrap_or(0);
                return Err(Error::Infeasible(format!(
                    "student {st} needs {} bytes; the largest free device has {largest}",
                    need[st]
                )));
            }
        }
    }
    let dev = |d: usize| topology.devices[d].id.clone();
    let dims = ensemble.feature_dims();
    let mut fragments = Vec::with_capacity(s + 1);
    for (i, plan) in ensemble.students.iter().enumerate() {
        fragments.push(Fragment {
            id: format!("student{i}"),
            device: dev(host[i]),
            param_bytes: plan.params as u64 * cfg.bytes_per_param,
            flops: count_flops(&plan.spec, 1)?,
            output_bytes: dims[i] as u64 * cfg.bytes_per_value,
        });
    }
    fragments.push(Fragment {
        id: "fusion".into(),
        device: dev(host[0]),
        param_bytes: fusion_params,
        flops: count_flops(&ensemble.fusion, 1)?,
        output_bytes: ensemble.classes as u64 * cfg.bytes_per_value,
    });
    let transfers = (1..s)
        .filter(|&i| host[i] != host[0])
        .map(|i| Transfer {
            tensor: format!("student{i}.features"),
            from: dev(host[i]),
            to: dev(host[0]),
            bytes: fragments[i].output_bytes,
        })
        .collect();
    let placement = Placement {
        version: PLACEMENT_VERSION,
        kind: PlacementKind::Nonn,
        config: *cfg,
        fragments,
        schedule: vec![
            Phase {
                name: "students".into(),
                fragments: (0..s).collect(),
                transfers,
            },
            Phase {
                name: "fusion".into(),
                fragments: vec![s],
                transfers: Vec::new(),
            },
        ],
    };
    placement.validate()?;
    placement.check_memory(topology)?;
    Ok(placement)
}

/// Channel counts of `c` split evenly over `d` devices, larger shards first.
pub fn shard_sizes(c: usize, d: usize) -> Vec<usize> {
    (0..d).map(|k| c / d + usize::from(k < c % d)).collect()
}

/// One channel-parallel stage: the work of each shard and the bytes per
/// output channel.
struct Stage {
    name: String,
    /// `(params, flops)` of a shard with `c` output channels.
    cost: Box<dyn Fn(u64) -> (u64, u64)>,
    /// Replicated parameters every shard holds.
    shared_params: u64,
    channels: usize,
    values_per_channel: u64,
}

fn split_stages(spec: &ModelSpec) -> Result<Vec<(usize, Option<Stage>)>> {
    let plan = spec.plan()?;
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = &plan.input_shapes[i];
        let output = &plan.output_shapes[i];
        let spatial: u64 = output[1..].iter().product::<usize>() as u64;
        match &layer.kind {
            LayerKind::Dense { units, bias } => {
                let fan_in = input.iter().product::<usize>() as u64;
                let b = u64::from(*bias);
                out.push((
                    i,
                    Some(Stage {
                        name: layer.id.clone(),
                        cost: Box::new(move |c| (fan_in * c + b * c, 2 * fan_in * c)),
                        shared_params: 0,
                        channels: *units,
                        values_per_channel: 1,
                    }),
                ));
            }
            LayerKind::Conv2d {
                channels, kernel, bias, ..
            } => {
                let per = input[0] as u64 * (kernel * kernel) as u64;
                let b = u64::from(*bias);
                out.push((
                    i,
                    Some(Stage {
                        name: layer.id.clone(),
                        cost: Box::new(move |c| (c * per + b * c, 2 * spatial * c * per)),
                        shared_params: 0,
                        channels: *channels,
                        values_per_channel: spatial,
                    }),
                ));
            }
            LayerKind::ResidualBlock { channels, stride } => {
                let cin = input[0] as u64;
                let cout = *channels as u64;
                let proj = u64::from(crate::nn::count::residual_needs_projection(input[0], *channels, *stride));
                out.push((
                    i,
                    Some(Stage {
                        name: format!("{}.conv1", layer.id),
                        cost: Box::new(move |c| (c * cin * 9, 2 * spatial * c * cin * 9)),
                        shared_params: 2 * cin,
                        channels: *channels,
                        values_per_channel: spatial,
                    }),
                ));
                out.push((
                    i,
                    Some(Stage {
                        name: format!("{}.conv2", layer.id),
                        cost: Box::new(move |c| {
                            (
                                c * cout * 9 + proj * c * cin,
                                2 * spatial * c * cout * 9 + proj * 2 * spatial * c * cin,
                            )
                        }),
                        shared_params: 2 * cout,
                        channels: *channels,
                        values_per_channel: spatial,
                    }),
                ));
            }
            LayerKind::BatchnormStub => {
                let shared = 2 * input[0] as u64;
                out.push((
                    i,
                    Some(Stage {
                        name: layer.id.clone(),
                        cost: Box::new(|_| (0, 0)),
                        shared_params: shared,
                        channels: 0,
                        values_per_channel: 0,
                    }),
                ));
            }
            LayerKind::Relu | LayerKind::AvgpoolGlobal => {}
            LayerKind::SoftmaxOutput | LayerKind::Concat { .. } => out.push((i, None)),
        }
    }
    Ok(out)
}

/// Channel-parallel execution of `model` on the first `d` devices. Every
/// conv/dense layer (each convolution of a residual block) splits its
/// output channels evenly; its output is then all-gathered, so each of the
/// `d` devices fetches the `d - 1` shards it lacks and the stage moves
/// `(d - 1)` times the activation. Batchnorm parameters are replicated;
/// element-wise layers run on every device's full copy; layers that cannot
/// be split stay whole on the first device.
pub fn plan_split_placement(model: &ModelSpec, topology: &Topology, d: usize, cfg: &PlacementConfig) -> Result<Placement> {
    topology.validate()?;
    if d == 0 || d > topology.devices.len() {
        return Err(Error::InvalidArgument(format!(
            "split degree {d} needs 1..={} devices",
            topology.devices.len()
        )));
    }
    let devs: Vec<String> = topology.devices[..d].iter().map(|x| x.id.clone()).collect();
    let mut fragments = Vec::new();
    let mut schedule = Vec::new();
    for (i, stage) in split_stages(model)? {
        match stage {
            Some(st) => {
                let shards = if st.channels == 0 { vec![0; d] } else { shard_sizes(st.channels, d) };
                let first = fragments.len();
                for (k, &c) in shards.iter().enumerate() {
                    let (params, flops) = (st.cost)(c as u64);
                    fragments.push(Fragment {
                        id: format!("{}@{k}", st.name),
                        device: devs[k].clone(),
                        param_bytes: (params + st.shared_params) * cfg.bytes_per_param,
                        flops,
                        output_bytes: c as u64 * st.values_per_channel * cfg.bytes_per_value,
                    });
                }
                let mut transfers = Vec::new();
                for (j, &c) in shards.iter().enumerate() {
                    let bytes = c as u64 * st.values_per_channel * cfg.bytes_per_value;
                    if bytes == 0 {
                        continue;
                    }
                    for (k, to) in devs.iter().enumerate() {
                        if k != j {
                            transfers.push(Transfer {
                                tensor: st.name.clone(),
                                from: devs[j].clone(),
                                to: to.clone(),
                                bytes,
                            });
                        }
                    }
                }
                schedule.push(Phase {
                    name: st.name,
                    fragments: (first..fragments.len()).collect(),
                    transfers,
                });
            }
            None => {
                let layer = &model.layers[i];
                let out: usize = model.plan()?.output_shapes[i].iter().product();
                fragments.push(Fragment {
                    id: layer.id.clone(),
                    device: devs[0].clone(),
                    param_bytes: 0,
                    flops: 0,
                    output_bytes: out as u64 * cfg.bytes_per_value,
                });
                schedule.push(Phase {
                    name: layer.id.clone(),
                    fragments: vec![fragments.len() - 1],
                    transfers: Vec::new(),
                });
            }
        }
    }
    let placement = Placement {
        version: PLACEMENT_VERSION,
        kind: PlacementKind::Split,
        config: *cfg,
        fragments,
        schedule,
    };
    placement.validate()?;
    placement.check_memory(topology)?;
    Ok(placement)
}
