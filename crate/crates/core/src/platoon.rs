//! Platoon state and the class-a speed field.
//!
//! A platoon is a contiguous block of class-a density of reference level
//! `ρ*` (one or two lanes' critical density) between its tail and head
//! positions. Moving the block with the cell-transmission update is done by
//! shaping the class-a speed field each step: cells inside the block get
//! speeds that reproduce the block translated by `u·T`, the region just
//! ahead of the head is frozen so no mass runs away, and everything else
//! flows at the free-flow speed. Background classes keep their own speeds,
//! so they overtake through the unoccupied lanes.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::mcctm::{CellState, DENSITY_EPS};

/// How many lanes a platoon occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneMode {
    /// Single lane: highest overtaking capacity next to the platoon.
    OneLane,
    /// Two lanes: halved platoon length, lowest overtaking capacity.
    TwoLane,
}

impl LaneMode {
    pub fn label(self) -> &'static str {
        match self {
            LaneMode::OneLane => "one_lane",
            LaneMode::TwoLane => "two_lane",
        }
    }

    /// Reference density of the platoon block (veh/km) given the per-lane
    /// critical density.
    pub fn ref_density(self, sigma_lane: f64) -> f64 {
        match self {
            LaneMode::OneLane => sigma_lane,
            LaneMode::TwoLane => 2.0 * sigma_lane,
        }
    }
}

/// One controlled platoon.
#[derive(Debug, Clone)]
pub struct Platoon {
    pub id: u64,
    /// Head (downstream end) position, km from the road start.
    pub head: f64,
    /// Current speed command (km/h).
    pub speed: f64,
    pub mode: LaneMode,
    /// Platoon mass in passenger-car equivalents.
    pub size: f64,
    /// PCE mass still waiting to flow in at the road start; positive while
    /// the tail is still upstream of the boundary.
    pub mass_to_enter: f64,
}

impl Platoon {
    pub fn new(id: u64, size: f64, speed: f64) -> Self {
        Platoon { id, head: 0.0, speed, mode: LaneMode::OneLane, size, mass_to_enter: size }
    }

    pub fn ref_density(&self, sigma_lane: f64) -> f64 {
        self.mode.ref_density(sigma_lane)
    }

    /// Block length (km), tied to the lane mode so mass is conserved.
    pub fn length(&self, sigma_lane: f64) -> f64 {
        self.size / self.ref_density(sigma_lane)
    }

    /// Tail (upstream end) position, km; negative while entering.
    pub fn tail(&self, sigma_lane: f64) -> f64 {
        self.head - self.length(sigma_lane)
    }

    /// Move downstream by one step.
    pub fn advance(&mut self, dt: f64) {
        self.head += self.speed * dt;
    }
}

/// Background flow that can pass a platoon block of density `ref_density`
/// on a section with critical density `sigma` (veh/h).
pub fn overtaking_flow(v: f64, sigma: f64, ref_density: f64) -> f64 {
    v * (sigma - ref_density)
}

/// Sample Poisson arrival times (hours) on `[0, horizon)`.
pub fn generate_arrival_times(
    rate_per_h: f64,
    horizon_h: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut times = Vec::new();
    if rate_per_h <= 0.0 {
        return times;
    }
    let exp = Exp::new(rate_per_h).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= horizon_h {
            return times;
        }
        times.push(t);
    }
}

/// The class-a density profile a platoon should have on the grid: `ρ*`
/// scaled by how much of each cell the block `[head − length, head]` covers.
pub fn reference_profile(
    platoon: &Platoon,
    n_cells: usize,
    cell_length: f64,
    sigma_lane: f64,
) -> Vec<f64> {
    let rho_star = platoon.ref_density(sigma_lane);
    let tail = platoon.tail(sigma_lane);
    (0..n_cells)
        .map(|i| {
            let lo = i as f64 * cell_length;
            let hi = lo + cell_length;
            let overlap = (platoon.head.min(hi) - tail.max(lo)).max(0.0);
            rho_star * overlap / cell_length
        })
        .collect()
}

/// Set the class-a speed field for every cell.
///
/// `platoons` must be ordered head-downstream-first with disjoint blocks.
/// Body-cell speeds are solved head-to-tail so that each cell's outflow
/// rebuilds the reference density in its downstream neighbour after one
/// step; the head cell releases only the mass that the advancing head
/// uncovers; cells from just past the head to the midpoint toward the next
/// platoon ahead are frozen to keep released mass from escaping.
pub fn impose_platoon_field(
    states: &mut [CellState],
    platoons: &[Platoon],
    cell_length: f64,
    sigma_lane: f64,
    v: f64,
) {
    let n = states.len();
    for s in states.iter_mut() {
        s.speed[0] = v;
    }
    // 1-based cell indices; cell i spans ((i−1)L, iL].
    let cell_1b = |x: f64| ((x / cell_length - 1e-9).ceil() as i64).max(i64::MIN + 1);
    let mut prev_tail_1b = n as i64 + 1;
    for p in platoons {
        let rho_star = p.ref_density(sigma_lane);
        let head_1b = cell_1b(p.head);
        let tail_1b = cell_1b(p.tail(sigma_lane));
        // Frozen zone past the head, reverting to free flow at the midpoint
        // toward the platoon ahead (or the road end for the first platoon).
        let mid = (head_1b + prev_tail_1b) as f64 / 2.0;
        let lo = (head_1b + 1).max(1);
        let hi = (prev_tail_1b - 1).min(n as i64);
        for i in lo..=hi {
            states[(i - 1) as usize].speed[0] = if (i as f64) < mid { 0.0 } else { v };
        }
        // Head cell: release what the advancing head uncovers.
        if (1..=n as i64).contains(&head_1b) {
            let s = &mut states[(head_1b - 1) as usize];
            let rho = s.rho[0];
            s.speed[0] = if rho <= DENSITY_EPS {
                v
            } else {
                (v * (1.0 - (1.0 - p.speed / v) * rho_star / rho)).clamp(0.0, v)
            };
        }
        // Body cells, descending so each uses its downstream neighbour's
        // freshly assigned speed. Beyond the road end the neighbour is a
        // ghost already at the reference density and platoon speed.
        let body_hi = (head_1b - 1).min(n as i64);
        let body_lo = tail_1b.max(1);
        for i in (body_lo..=body_hi).rev() {
            let idx = (i - 1) as usize;
            let (rho_next, u_next) = if idx + 1 < n {
                (states[idx + 1].rho[0], states[idx + 1].speed[0])
            } else {
                (rho_star, p.speed)
            };
            let rho = states[idx].rho[0];
            states[idx].speed[0] = if rho <= DENSITY_EPS {
                v
            } else {
                ((v * rho_star - (v - u_next) * rho_next) / rho).clamp(0.0, v)
            };
        }
        prev_tail_1b = tail_1b;
    }
}
