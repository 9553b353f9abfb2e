//! Macroscopic highway traffic simulation and control toolkit.
//!
//! The crate models a multi-class cell-transmission road on which truck
//! platoons act as controllable moving bottlenecks. Around that core it
//! provides:
//!
//! * [`scenario`] — scenario configuration (geometry, fundamental diagram,
//!   demand and platoon processes, run protocol) with a flat text format;
//! * [`mcctm`] — the multi-class cell-transmission flux kernels, including a
//!   capacity drop at congested lane-drop cells;
//! * [`platoon`] — platoon state and the speed field that shapes class-a
//!   density into a moving bottleneck profile;
//! * [`sim`] — the step-by-step simulation engine tying the above together
//!   with ramps, boundary queues, and metrics;
//! * [`queue`] — a fast transformed-time queueing predictor for bottleneck
//!   and platoon queues, used by the controllers for planning;
//! * [`control`] — platoon speed/lane planning and the idealized
//!   full-compliance speed controller;
//! * [`analysis`] — closed-form stability and throughput analysis of the
//!   platoon-release recursion, plus small simulators used to validate it;
//! * [`harness`] — Monte Carlo experiment runner with paired seeds across
//!   control cases and CSV reporting.

pub mod analysis;
pub mod control;
pub mod harness;
pub mod mcctm;
pub mod platoon;
pub mod queue;
pub mod scenario;
pub mod sim;

pub use scenario::{ControlCase, Scenario, ScenarioConfig};

/// Number of traffic classes tracked by the simulator.
pub const CLASS_COUNT: usize = 3;

/// Traffic classes tracked by the simulator.
///
/// Densities are stored per class so that controlled platoon mass, through
/// traffic, and exiting traffic can be routed and metered independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VehicleClass {
    /// Controlled truck platoons (counted in passenger-car equivalents).
    Platoon,
    /// Background traffic bound for the downstream end of the road.
    Mainline,
    /// Background traffic that leaves at an off-ramp.
    OffRamp,
}

impl VehicleClass {
    /// All classes, in storage order.
    pub const ALL: [VehicleClass; CLASS_COUNT] =
        [VehicleClass::Platoon, VehicleClass::Mainline, VehicleClass::OffRamp];

    /// Index of this class into per-class arrays.
    pub fn index(self) -> usize {
        match self {
            VehicleClass::Platoon => 0,
            VehicleClass::Mainline => 1,
            VehicleClass::OffRamp => 2,
        }
    }

    /// Short label used in CSV headers and log output.
    pub fn label(self) -> &'static str {
        match self {
            VehicleClass::Platoon => "platoon",
            VehicleClass::Mainline => "mainline",
            VehicleClass::OffRamp => "offramp",
        }
    }
}
