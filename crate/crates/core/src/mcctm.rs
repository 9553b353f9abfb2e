//! Multi-class cell-transmission flux kernels.
//!
//! Each cell tracks one density and one free-flow speed per vehicle class.
//! Interface flows are the minimum of an upstream demand and a downstream
//! supply; demand is shared across classes in proportion to what each class
//! tries to send, supply in proportion to upstream class densities. A cell's
//! capacity is a demand-weighted mix of per-class capacities, so slow
//! classes drag it below `V·σ`. Lane-drop discharge is further reduced while
//! the sending cell is congested (capacity drop).
//!
//! The functions here are pure; the engine in [`crate::sim`] sequences them
//! into time steps.

use thiserror::Error;

use crate::scenario::Scenario;
use crate::CLASS_COUNT;

/// Densities below this count as an empty cell when forming ratios.
pub const DENSITY_EPS: f64 = 1e-12;

/// Flows below this count as zero when allocating shares.
pub const FLOW_EPS: f64 = 1e-9;

/// Static parameters of one cell.
#[derive(Debug, Clone, Copy)]
pub struct CellParams {
    /// Upstream face (km from the road start).
    pub x_up: f64,
    /// Cell length (km).
    pub length: f64,
    pub lanes: u32,
    /// Critical density (veh/km, all lanes).
    pub sigma: f64,
    /// Critical density of the next cell downstream; the cell's own for the
    /// last cell. Enters the discharge reduction across a lane drop.
    pub sigma_next: f64,
    /// Jam density (veh/km, all lanes).
    pub jam: f64,
    /// Free-flow speed (km/h).
    pub v: f64,
    /// Congestion-wave speed (km/h).
    pub w: f64,
    /// Capacity-drop ratio.
    pub alpha: f64,
}

impl CellParams {
    /// Capacity when every class moves at the free-flow speed (veh/h).
    pub fn base_capacity(&self) -> f64 {
        self.v * self.sigma
    }
}

/// Build per-cell parameters for a validated scenario.
pub fn build_cells(sc: &Scenario) -> Vec<CellParams> {
    let fd = &sc.config().fd;
    let w = fd.wave_speed();
    (0..sc.n_cells())
        .map(|i| {
            let lanes = sc.lanes(i);
            let lanes_next = if i + 1 < sc.n_cells() { sc.lanes(i + 1) } else { lanes };
            CellParams {
                x_up: sc.cell_start(i),
                length: sc.config().road.cell_length_km,
                lanes,
                sigma: fd.critical_density_per_lane * lanes as f64,
                sigma_next: fd.critical_density_per_lane * lanes_next as f64,
                jam: fd.jam_density_per_lane * lanes as f64,
                v: fd.free_flow_speed,
                w,
                alpha: fd.capacity_drop_ratio,
            }
        })
        .collect()
}

/// Dynamic state of one cell: per-class density (veh/km, PCE) and per-class
/// free-flow speed (km/h).
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub rho: [f64; CLASS_COUNT],
    pub speed: [f64; CLASS_COUNT],
}

impl CellState {
    /// Empty cell with all classes at the free-flow speed.
    pub fn empty(v: f64) -> Self {
        CellState { rho: [0.0; CLASS_COUNT], speed: [v; CLASS_COUNT] }
    }

    pub fn total_density(&self) -> f64 {
        self.rho.iter().sum()
    }
}

/// What each class tries to send at its own speed (veh/h), plus the sum.
pub fn raw_demands(s: &CellState) -> ([f64; CLASS_COUNT], f64) {
    let mut d = [0.0; CLASS_COUNT];
    let mut tot = 0.0;
    for k in 0..CLASS_COUNT {
        d[k] = s.speed[k] * s.rho[k];
        tot += d[k];
    }
    (d, tot)
}

/// Mixed-speed cell capacity (veh/h): per-class capacities weighted by each
/// class's share of the raw demand. Empty cells fall back to `V·σ`.
pub fn cell_capacity(p: &CellParams, s: &CellState) -> f64 {
    let (d, d_tot) = raw_demands(s);
    if d_tot <= FLOW_EPS {
        return p.base_capacity();
    }
    let mut q = 0.0;
    for k in 0..CLASS_COUNT {
        if d[k] <= 0.0 {
            continue;
        }
        let u = s.speed[k];
        let cap = p.v * p.jam * p.sigma * u / ((p.jam - p.sigma) * u + p.v * p.sigma);
        q += d[k] * cap;
    }
    q / d_tot
}

/// Scale raw per-class demands so their sum stays within the capacity.
pub fn scale_demands(d: &[f64; CLASS_COUNT], d_tot: f64, capacity: f64) -> [f64; CLASS_COUNT] {
    let scale = if d_tot > capacity && d_tot > FLOW_EPS { capacity / d_tot } else { 1.0 };
    let mut out = [0.0; CLASS_COUNT];
    for k in 0..CLASS_COUNT {
        out[k] = d[k] * scale;
    }
    out
}

/// Per-class demand flows of a cell and their sum (veh/h).
pub fn class_demands(p: &CellParams, s: &CellState) -> ([f64; CLASS_COUNT], f64) {
    let (d, d_tot) = raw_demands(s);
    let capacity = cell_capacity(p, s);
    let out = scale_demands(&d, d_tot, capacity);
    let sum = out.iter().sum();
    (out, sum)
}

/// Discharge limit this cell imposes on the interface to its downstream
/// neighbour (veh/h). Shrinks linearly in the cell's density above critical;
/// at critical density it equals the downstream capacity, so it only binds
/// once the sender is congested.
pub fn capacity_drop_flow(p: &CellParams, rho_total: f64) -> f64 {
    p.w * (p.sigma_next / p.sigma) * (p.jam - (1.0 - p.alpha) * p.sigma - p.alpha * rho_total)
}

/// Aggregate receiving limit of a cell (veh/h): room to the jam density,
/// capped by the cell's capacity and the upstream discharge limit.
pub fn aggregate_supply(p: &CellParams, rho_total: f64, capacity: f64, f_upstream: f64) -> f64 {
    (p.w * (p.jam - rho_total)).min(capacity).min(f_upstream).max(0.0)
}

/// Split an aggregate supply across classes by upstream composition and take
/// the per-class minimum with upstream demand. An empty upstream cell sends
/// nothing.
pub fn interface_flows(
    demand_up: &[f64; CLASS_COUNT],
    rho_up: &[f64; CLASS_COUNT],
    supply_agg: f64,
) -> [f64; CLASS_COUNT] {
    let rho_tot: f64 = rho_up.iter().sum();
    let mut q = [0.0; CLASS_COUNT];
    if rho_tot <= DENSITY_EPS {
        return q;
    }
    for k in 0..CLASS_COUNT {
        q[k] = demand_up[k].min(rho_up[k] / rho_tot * supply_agg).max(0.0);
    }
    q
}

/// Densities and flows that characterize a lane-drop bottleneck once its
/// sending cell is congested.
#[derive(Debug, Clone, Copy)]
pub struct DischargeConstants {
    /// Density the congested sending cell settles at (veh/km).
    pub queue_density: f64,
    /// Density discharged into the reduced section (veh/km).
    pub discharge_density: f64,
    /// Discharge flow `V·discharge_density` (veh/h).
    pub discharge_flow: f64,
}

#[derive(Debug, Error)]
pub enum BottleneckError {
    #[error("cell does not narrow: downstream critical density {downstream} >= upstream {upstream}")]
    NotNarrowing { upstream: f64, downstream: f64 },
}

/// Closed-form discharge constants of the lane-drop interface leaving `p`.
///
/// They solve the congested fixed point where the sending cell's discharge
/// limit equals the free-flow outflow of the reduced section.
pub fn discharge_constants(p: &CellParams) -> Result<DischargeConstants, BottleneckError> {
    let (sm, sp) = (p.sigma, p.sigma_next);
    if sp >= sm {
        return Err(BottleneckError::NotNarrowing { upstream: sm, downstream: sp });
    }
    let denom = sm - p.alpha * sp;
    let queue_density = (p.jam * (sm - sp) + (1.0 - p.alpha) * sm * sp) / denom;
    let discharge_density = (1.0 - p.alpha) * sm * sp / denom;
    Ok(DischargeConstants {
        queue_density,
        discharge_density,
        discharge_flow: p.v * discharge_density,
    })
}

/// Supply left for an on-ramp after the merge cell's mainline demand and any
/// prioritized ramp inflow.
pub fn onramp_residual(supply_agg: f64, demand_agg: f64, prioritized_inflow: f64) -> f64 {
    (supply_agg - demand_agg - prioritized_inflow).max(0.0)
}

/// Admit on-ramp inflow against a residual supply (veh/h per class).
///
/// Prioritized classes enter at their arrival rate without queueing. The
/// rest demand their arrivals plus one step's worth of queue drain; if that
/// exceeds the residual, the residual is split in proportion to the queues
/// (or to arrivals, when no queue has formed yet).
pub fn allocate_onramp(
    residual: f64,
    arrivals: &[f64; CLASS_COUNT],
    queues: &[f64; CLASS_COUNT],
    dt: f64,
    prioritized: &[bool; CLASS_COUNT],
) -> [f64; CLASS_COUNT] {
    let mut inflow = [0.0; CLASS_COUNT];
    let mut demand = [0.0; CLASS_COUNT];
    let mut demand_tot = 0.0;
    for k in 0..CLASS_COUNT {
        if prioritized[k] {
            inflow[k] = arrivals[k];
        } else {
            demand[k] = arrivals[k] + queues[k] / dt;
            demand_tot += demand[k];
        }
    }
    if demand_tot <= residual + FLOW_EPS {
        for k in 0..CLASS_COUNT {
            if !prioritized[k] {
                inflow[k] = demand[k];
            }
        }
        return inflow;
    }
    let queue_tot: f64 = (0..CLASS_COUNT).filter(|&k| !prioritized[k]).map(|k| queues[k]).sum();
    let by_queue = queue_tot > DENSITY_EPS;
    let weight_tot = if by_queue { queue_tot } else { demand_tot };
    if weight_tot <= FLOW_EPS {
        return inflow;
    }
    for k in 0..CLASS_COUNT {
        if prioritized[k] {
            continue;
        }
        let w = if by_queue { queues[k] } else { demand[k] };
        inflow[k] = demand[k].min(residual * w / weight_tot);
    }
    inflow
}

/// Off-ramp exit flows (veh/h per class).
///
/// Exiting classes leave at the minimum of their demand, their share of the
/// downstream supply, and their share of the ramp capacity; the caller zeros
/// their mainline interface flow.
pub fn offramp_flows(
    demands: &[f64; CLASS_COUNT],
    rho: &[f64; CLASS_COUNT],
    supply_next_agg: f64,
    ramp_capacity: f64,
    exiting: &[bool; CLASS_COUNT],
) -> [f64; CLASS_COUNT] {
    let rho_tot: f64 = rho.iter().sum();
    let rho_exit: f64 = (0..CLASS_COUNT).filter(|&k| exiting[k]).map(|k| rho[k]).sum();
    let mut s = [0.0; CLASS_COUNT];
    if rho_exit <= DENSITY_EPS {
        return s;
    }
    for k in 0..CLASS_COUNT {
        if !exiting[k] || rho[k] <= DENSITY_EPS {
            continue;
        }
        let supply_share = if rho_tot > DENSITY_EPS { rho[k] / rho_tot * supply_next_agg } else { 0.0 };
        let ramp_share = rho[k] / rho_exit * ramp_capacity;
        s[k] = demands[k].min(supply_share).min(ramp_share).max(0.0);
    }
    s
}

/// Total time spent from per-step vehicle counts: `Σ_t count·T`, per class
/// and summed (veh·h).
pub fn compute_tts(
    dt: f64,
    counts: impl IntoIterator<Item = [f64; CLASS_COUNT]>,
) -> ([f64; CLASS_COUNT], f64) {
    let mut per_class = [0.0; CLASS_COUNT];
    for c in counts {
        for k in 0..CLASS_COUNT {
            per_class[k] += c[k] * dt;
        }
    }
    (per_class, per_class.iter().sum())
}
