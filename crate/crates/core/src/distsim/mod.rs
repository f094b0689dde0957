//! Analytic simulator of distributed inference: compute, per-link traffic,
//! latency and energy of student ensembles versus channel-split models.

pub mod compare;
pub mod placement;
pub mod simulate;
pub mod topology;

pub use compare::{compare, format_speedup, SpeedupRow, SpeedupTable};
pub use placement::{
    plan_nonn_placement, plan_split_placement, shard_sizes, Fragment, Phase, Placement, PlacementConfig, PlacementKind,
    Transfer, PLACEMENT_VERSION,
};
pub use simulate::{simulate, DeviceReport, LinkReport, PhaseReport, SimReport};
pub use topology::{calibrated_rate, DeviceSpec, LinkSpec, Topology};

/// Measured single-device latency of the wide-resnet teacher, seconds.
pub const TEACHER_LATENCY: f64 = 1.405;
/// Measured per-student latency of the two-student ensemble, seconds.
pub const STUDENT_LATENCY: f64 = 0.115;

/// Edge board calibrated so the 40-4 wide-resnet teacher (`teacher_flops`)
/// takes [`TEACHER_LATENCY`]; energy per FLOP from its measured 3430.67 mJ.
pub fn calibrated_device(teacher_flops: u64, memory_bytes: u64) -> DeviceSpec {
    DeviceSpec {
        id: "rpi".into(),
        memory_bytes,
        compute_rate: calibrated_rate(teacher_flops, TEACHER_LATENCY),
        compute_energy: 3.43067 / teacher_flops as f64,
    }
}

/// Point-to-point 100 Mbit/s wired link with 1 ms per message.
pub fn wired_link() -> LinkSpec {
    LinkSpec {
        a: String::new(),
        b: String::new(),
        bandwidth: 12.5e6,
        latency: 1e-3,
        transfer_energy: 5e-8,
    }
}
