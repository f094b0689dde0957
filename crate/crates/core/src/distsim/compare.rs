//! Pairwise speedup tables.

use serde::{Deserialize, Serialize};

use super::simulate::SimReport;
use super::topology::inf_as_null;
use crate::error::{Error, Result};

/// How many times `candidate` beats `baseline`: every ratio is
/// `baseline / candidate`, and `x / x` is 1 (including `0 / 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub baseline: String,
    pub candidate: String,
    #[serde(with = "inf_as_null")]
    pub latency: f64,
    #[serde(with = "inf_as_null")]
    pub energy: f64,
    #[serde(with = "inf_as_null")]
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
}

fn ratio(baseline: f64, candidate: f64) -> f64 {
    if baseline == candidate {
        1.0
    } else {
        baseline / candidate
    }
}

/// Every ordered pair of distinct reports, in list order.
pub fn compare(reports: &[(String, SimReport)]) -> Result<SpeedupTable> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "comparison needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, (bn, b)) in reports.iter().enumerate() {
        for (j, (cn, c)) in reports.iter().enumerate() {
            if i != j {
                rows.push(SpeedupRow {
                    baseline: bn.clone(),
                    candidate: cn.clone(),
                    latency: ratio(b.latency, c.latency),
                    energy: ratio(b.energy, c.energy),
                    bytes: ratio(b.total_bytes as f64, c.total_bytes as f64),
                });
            }
        }
    }
    Ok(SpeedupTable { rows })
}

/// `27.06x`.
pub fn format_speedup(r: f64) -> String {
    format!("{r:.2}x")
}

impl SpeedupTable {
    pub fn get(&self, baseline: &str, candidate: &str) -> Option<&SpeedupRow> {
        self.rows.iter().find(|r| r.baseline == baseline && r.candidate == candidate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("baseline,candidate,latency_speedup,energy_ratio,bytes_ratio\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.baseline, r.candidate, r.latency, r.energy, r.bytes));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}
