//! Devices, point-to-point links and the topology file.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const TOPOLOGY_VERSION: u32 = 1;

/// `f64::INFINITY` travels as JSON `null`.
pub(crate) mod inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub memory_bytes: u64,
    /// FLOPs per second.
    pub compute_rate: f64,
    /// Joules per FLOP.
    pub compute_energy: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.memory_bytes > 0
            && self.compute_rate > 0.0
            && self.compute_energy > 0.0
            && self.compute_energy.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "device `{}`: memory, compute rate and compute energy must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Undirected point-to-point link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    /// Bytes per second; `null` in JSON for an ideal link.
    #[serde(with = "inf_as_null")]
    pub bandwidth: f64,
    /// Seconds added to every message.
    pub latency: f64,
    /// Joules per byte moved.
    pub transfer_energy: f64,
}

impl LinkSpec {
    pub fn connects(&self, x: &str, y: &str) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "link {}-{}: bandwidth must be positive and latency non-negative",
                self.a, self.b
            )));
        }
        if !(self.transfer_energy >= 0.0 && self.transfer_energy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "link {}-{}: transfer energy must be non-negative",
                self.a, self.b
            )));
        }
        if self.a == self.b {
            return Err(Error::InvalidArgument(format!("link {}-{} is a self loop", self.a, self.b)));
        }
        Ok(())
    }

    /// Seconds to move `bytes` in one message.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth + self.latency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub version: u32,
    pub devices: Vec<DeviceSpec>,
    pub links: Vec<LinkSpec>,
}

impl Topology {
    pub fn new(devices: Vec<DeviceSpec>, links: Vec<LinkSpec>) -> Result<Topology> {
        let t = Topology {
            version: TOPOLOGY_VERSION,
            devices,
            links,
        };
        t.validate()?;
        Ok(t)
    }

    /// `n` copies of `device` (ids `dev0`, `dev1`, ...) with a copy of `link`
    /// between every pair.
    pub fn fully_connected(n: usize, device: &DeviceSpec, link: &LinkSpec) -> Result<Topology> {
        let devices: Vec<DeviceSpec> = (0..n)
            .map(|i| DeviceSpec {
                id: format!("dev{i}"),
                ..device.clone()
            })
            .collect();
        let mut links = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                links.push(LinkSpec {
                    a: devices[i].id.clone(),
                    b: devices[j].id.clone(),
                    ..link.clone()
                });
            }
        }
        Topology::new(devices, links)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TOPOLOGY_VERSION {
            return Err(Error::Corrupt(format!("unsupported topology version {}", self.version)));
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            d.validate()?;
            if !ids.insert(d.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate device `{}`", d.id)));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            l.validate()?;
            for end in [&l.a, &l.b] {
                if !ids.contains(end.as_str()) {
                    return Err(Error::InvalidArgument(format!("link endpoint `{end}` is not a device")));
                }
            }
            let key = if l.a < l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
            if !pairs.insert(key) {
                return Err(Error::InvalidArgument(format!("duplicate link {}-{}", l.a, l.b)));
            }
        }
        Ok(())
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn link(&self, x: &str, y: &str) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.connects(x, y))
    }

    /// Copy with every link's bandwidth multiplied by `factor`.
    pub fn scale_bandwidth(&self, factor: f64) -> Topology {
        let mut t = self.clone();
        t.links.iter_mut().for_each(|l| l.bandwidth *= factor);
        t
    }

    /// Copy with every device's compute rate multiplied by `factor`.
    pub fn scale_compute(&self, factor: f64) -> Topology {
        let mut t = self.clone();
        t.devices.iter_mut().for_each(|d| d.compute_rate *= factor);
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Topology> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Topology = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        t.validate()?;
        Ok(t)
    }
}

/// FLOPs per second that make `flops` take `seconds`.
pub fn calibrated_rate(flops: u64, seconds: f64) -> f64 {
    flops as f64 / seconds
}
