//! Closed-form latency and energy of one inference under a placement.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::placement::{Placement, PlacementKind};
use super::topology::Topology;
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    /// Slowest device's compute in this phase.
    pub compute_time: f64,
    /// Transfers of this phase, one after another.
    pub comm_time: f64,
    pub bytes: u64,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub id: String,
    pub flops: u64,
    pub compute_time: f64,
    /// Compute energy plus the energy of every byte this device sends.
    pub energy: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub param_bytes: u64,
    /// Parameters plus the largest activation held in any phase (own output
    /// and everything received in that phase).
    pub peak_memory_bytes: u64,
}

/// Directed traffic over one link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkReport {
    pub from: String,
    pub to: String,
    pub bytes: u64,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub version: u32,
    pub kind: PlacementKind,
    /// Seconds per inference: `compute_time + comm_time`.
    pub latency: f64,
    pub compute_time: f64,
    pub comm_time: f64,
    pub total_bytes: u64,
    pub total_flops: u64,
    /// Joules per inference over all devices.
    pub energy: f64,
    pub compute_energy: f64,
    pub transfer_energy: f64,
    pub phases: Vec<PhaseReport>,
    pub devices: Vec<DeviceReport>,
    pub links: Vec<LinkReport>,
}

impl SimReport {
    pub fn device(&self, id: &str) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SimReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// One row per phase plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,compute_time,comm_time,bytes,messages\n");
        for p in &self.phases {
            out.push_str(&format!("{},{},{},{},{}\n", p.name, p.compute_time, p.comm_time, p.bytes, p.messages));
        }
        let messages: usize = self.phases.iter().map(|p| p.messages).sum();
        out.push_str(&format!(
            "total,{},{},{},{}\n",
            self.compute_time, self.comm_time, self.total_bytes, messages
        ));
        out
    }
}

#[derive(Default)]
struct DeviceTally {
    flops: u64,
    compute_time: f64,
    compute_energy: f64,
    transfer_energy: f64,
    sent: u64,
    received: u64,
    params: u64,
    peak_activation: u64,
}

/// Phases run in order. A phase costs its slowest device's compute
/// (`flops / rate`, fragments on one device run back to back) plus each of
/// its transfers in turn (`bytes / bandwidth + latency`). Energy is
/// `flops * J/FLOP` on the computing device and `bytes * J/byte` on the
/// sender.
pub fn simulate(placement: &Placement, topology: &Topology) -> Result<SimReport> {
    placement.validate()?;
    topology.validate()?;
    placement.check_memory(topology)?;

    let mut tally: BTreeMap<&str, DeviceTally> = BTreeMap::new();
    for f in &placement.fragments {
        tally.entry(f.device.as_str()).or_default().params += f.param_bytes;
    }
    let mut links: BTreeMap<(String, String), (u64, usize)> = BTreeMap::new();
    // FLOPs on the critical path, per compute rate: summing integers and
    // dividing once keeps single-device latency exactly `flops / rate`.
    let mut critical: BTreeMap<u64, u64> = BTreeMap::new();
    let mut phases = Vec::with_capacity(placement.schedule.len());

    for phase in &placement.schedule {
        let mut busy: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
        let mut held: BTreeMap<&str, u64> = BTreeMap::new();
        for &i in &phase.fragments {
            let f = &placement.fragments[i];
            let dev = topology
                .device(&f.device)
                .ok_or_else(|| Error::Simulation(format!("fragment `{}` is on unknown device `{}`", f.id, f.device)))?;
            let t = f.flops as f64 / dev.compute_rate;
            let b = busy.entry(f.device.as_str()).or_insert((0, dev.compute_rate));
            b.0 += f.flops;
            *held.entry(f.device.as_str()).or_default() += f.output_bytes;
            let d = tally.entry(f.device.as_str()).or_default();
            d.flops += f.flops;
            d.compute_time += t;
            d.compute_energy += f.flops as f64 * dev.compute_energy;
        }
        let slowest = busy
            .values()
            .map(|&(flops, rate)| (flops as f64 / rate, flops, rate))
            .fold((0.0, 0, 1.0), |best, x| if x.0 > best.0 { x } else { best });
        let compute_time = slowest.0;
        if slowest.1 > 0 {
            *critical.entry(slowest.2.to_bits()).or_default() += slowest.1;
        }

        let mut comm_time = 0.0;
        let mut bytes = 0;
        for t in &phase.transfers {
            if t.from == t.to {
                return Err(Error::Simulation(format!("transfer of `{}` from `{}` to itself", t.tensor, t.from)));
            }
            let link = topology
                .link(&t.from, &t.to)
                .ok_or_else(|| Error::Simulation(format!("no link between `{}` and `{}` for `{}`", t.from, t.to, t.tensor)))?;
            comm_time += link.transfer_time(t.bytes);
            bytes += t.bytes;
            let s = tally.entry(t.from.as_str()).or_default();
            s.sent += t.bytes;
            s.transfer_energy += t.bytes as f64 * link.transfer_energy;
            tally.entry(t.to.as_str()).or_default().received += t.bytes;
            *held.entry(t.to.as_str()).or_default() += t.bytes;
            let l = links.entry((t.from.clone(), t.to.clone())).or_default();
            l.0 += t.bytes;
            l.1 += 1;
        }
        for (dev, h) in held {
            let d = tally.entry(dev).or_default();
            d.peak_activation = d.peak_activation.max(h);
        }
        phases.push(PhaseReport {
            name: phase.name.clone(),
            compute_time,
            comm_time,
            bytes,
            messages: phase.transfers.len(),
        });
    }

    let devices: Vec<DeviceReport> = topology
        .devices
        .iter()
        .filter_map(|spec| {
            tally.get(spec.id.as_str()).map(|d| DeviceReport {
                id: spec.id.clone(),
                flops: d.flops,
                compute_time: d.compute_time,
                energy: d.compute_energy + d.transfer_energy,
                bytes_sent: d.sent,
                bytes_received: d.received,
                param_bytes: d.params,
                peak_memory_bytes: d.params + d.peak_activation,
            })
        })
        .collect();
    let compute_time: f64 = critical.iter().map(|(&rate, &flops)| flops as f64 / f64::from_bits(rate)).sum();
    let comm_time: f64 = phases.iter().map(|p| p.comm_time).sum();
    let compute_energy: f64 = tally.values().map(|d| d.compute_energy).sum();
    let transfer_energy: f64 = tally.values().map(|d| d.transfer_energy).sum();
    Ok(SimReport {
        version: REPORT_VERSION,
        kind: placement.kind,
        latency: compute_time + comm_time,
        compute_time,
        comm_time,
        total_bytes: phases.iter().map(|p| p.bytes).sum(),
        total_flops: devices.iter().map(|d| d.flops).sum(),
        energy: devices.iter().map(|d| d.energy).sum(),
        compute_energy,
        transfer_energy,
        phases,
        devices,
        links: links
            .into_iter()
            .map(|((from, to), (bytes, messages))| LinkReport { from, to, bytes, messages })
            .collect(),
    })
}
