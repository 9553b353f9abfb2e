//! Time-stepping engine.
//!
//! One step sequences, in order: demand redraw, platoon entries, control,
//! speed-field imposition, flux evaluation (demands, capacities, discharge
//! limits, supplies), boundary and interior interface flows, off-ramp exits,
//! on-ramp admission, the conservative density update, platoon advancement,
//! and metric recording.
//!
//! Randomness is split over two independent streams of one counter-based
//! generator seeded per run: stream 0 drives the held demand redraws, stream
//! 1 pregenerates every platoon arrival time and entry speed up front.  The
//! controller consumes no randomness, so runs with the same seed share
//! identical demand and platoon realisations across control cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::control::{ControlAction, Controller};
use crate::mcctm::{
    aggregate_supply, build_cells, capacity_drop_flow, cell_capacity, class_demands,
    compute_tts, interface_flows, offramp_flows, onramp_residual, CellParams, CellState,
    FLOW_EPS,
};
use crate::platoon::{generate_arrival_times, impose_platoon_field, LaneMode, Platoon};
use crate::scenario::Scenario;
use crate::{VehicleClass, CLASS_COUNT};

/// Densities this far below zero are clamped; anything lower is an error.
pub const NEG_DENSITY_TOL: f64 = 1e-9;

/// Relative tolerance on the mass ledger (see [`Engine::conservation_error`]).
pub const CONSERVATION_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("class {class} density {density:.3e} in cell {cell} went negative at step {step}")]
    NegativeDensity {
        step: u32,
        cell: usize,
        class: usize,
        density: f64,
    },
}

/// One commanded platoon state, kept when detailed logging is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandRecord {
    pub step: u32,
    pub platoon: u64,
    pub speed: f64,
    pub lane: LaneMode,
    pub cap: f64,
}

/// One platoon position sample, kept when detailed logging is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub step: u32,
    pub platoon: u64,
    pub head_km: f64,
    pub speed: f64,
}

/// One boundary-demand redraw (before warm scaling).
#[derive(Debug, Clone, PartialEq)]
pub struct DemandRecord {
    pub step: u32,
    /// Road-start draw per class (veh/h).
    pub main: [f64; CLASS_COUNT],
    /// Per on-ramp draw per class (veh/h).
    pub onramp: Vec<[f64; CLASS_COUNT]>,
}

/// How much per-step detail the engine keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetailLevel {
    /// Only per-step counts, bottleneck outflow, and the draw/arrival logs.
    Metrics,
    /// Additionally command and trajectory records for every platoon.
    Full,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dt_h: f64,
    /// Per-step vehicle count per class (road + ramp and origin queues).
    pub counts: Vec<[f64; CLASS_COUNT]>,
    /// Per-step total flow entering the reduced section (veh/h).
    pub bottleneck_outflow: Vec<f64>,
    /// Pregenerated platoon arrivals: entry time (h) and drawn speed (km/h).
    pub arrivals: Vec<(f64, f64)>,
    pub demand_log: Vec<DemandRecord>,
    pub commands: Vec<CommandRecord>,
    pub trajectories: Vec<TrajectoryRecord>,
    /// Total density per cell at sampled steps, when requested.
    pub spacetime: Vec<(u32, Vec<f64>)>,
    /// Mass ledger at the end of the run.
    pub injected: f64,
    pub ejected: f64,
    pub final_mass: f64,
}

impl RunOutput {
    /// Time spent per class and in total (veh·h).
    pub fn tts(&self) -> ([f64; CLASS_COUNT], f64) {
        compute_tts(self.dt_h, self.counts.iter().copied())
    }
}

/// Cell simulation of one scenario run.
pub struct Engine {
    scenario: Scenario,
    params: Vec<CellParams>,
    states: Vec<CellState>,
    platoons: Vec<Platoon>,
    controller: Controller,
    rng_demand: ChaCha8Rng,
    arrivals: Vec<(f64, f64)>,
    next_arrival: usize,
    next_platoon_id: u64,
    draw_main: [f64; CLASS_COUNT],
    draw_onramp: Vec<[f64; CLASS_COUNT]>,
    origin_queue: [f64; CLASS_COUNT],
    ramp_queues: Vec<[f64; CLASS_COUNT]>,
    step: u32,
    detail: DetailLevel,
    spacetime_stride: Option<u32>,
    // Ledger.
    injected: f64,
    ejected: f64,
    initial_mass: f64,
    // Records.
    counts: Vec<[f64; CLASS_COUNT]>,
    bottleneck_outflow: Vec<f64>,
    demand_log: Vec<DemandRecord>,
    command_log: Vec<CommandRecord>,
    trajectory_log: Vec<TrajectoryRecord>,
    spacetime: Vec<(u32, Vec<f64>)>,
    // Scratch buffers reused across steps.
    demands: Vec<[f64; CLASS_COUNT]>,
    demand_tot: Vec<f64>,
    capacity: Vec<f64>,
    discharge: Vec<f64>,
    supply: Vec<f64>,
    flows: Vec<[f64; CLASS_COUNT]>,
}

impl Engine {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let params = build_cells(&scenario);
        let cfg = scenario.config();
        let v = cfg.fd.free_flow_speed;
        let n = scenario.n_cells();
        let controller = Controller::for_case(cfg.control_case, &scenario);

        let mut rng_demand = ChaCha8Rng::seed_from_u64(seed);
        rng_demand.set_stream(0);
        let mut rng_platoon = ChaCha8Rng::seed_from_u64(seed);
        rng_platoon.set_stream(1);
        let mut times = generate_arrival_times(
            cfg.platoon.arrival_rate_per_h,
            cfg.time.horizon_h(),
            &mut rng_platoon,
        );
        // Platoon arrivals follow the same warm-up and cool-down scaling as
        // the background demand: halving a Poisson intensity is thinning.
        let warm_end = cfg.time.warmup_steps as f64 * cfg.time.step_h;
        let cool_start =
            (cfg.time.steps.saturating_sub(cfg.time.cooldown_steps)) as f64 * cfg.time.step_h;
        times.retain(|&t| {
            let scaled = t < warm_end || t >= cool_start;
            !scaled || rng_platoon.gen::<f64>() < 0.5
        });
        let arrivals: Vec<(f64, f64)> = times
            .into_iter()
            .map(|t| {
                let span = cfg.platoon.speed_max_kmh - cfg.platoon.speed_min_kmh;
                (t, cfg.platoon.speed_min_kmh + span * rng_platoon.gen::<f64>())
            })
            .collect();

        let n_ramps = cfg.road.onramps.len();
        Engine {
            params,
            states: vec![CellState::empty(v); n],
            platoons: Vec::new(),
            controller,
            rng_demand,
            arrivals,
            next_arrival: 0,
            next_platoon_id: 0,
            draw_main: [0.0; CLASS_COUNT],
            draw_onramp: vec![[0.0; CLASS_COUNT]; n_ramps],
            origin_queue: [0.0; CLASS_COUNT],
            ramp_queues: vec![[0.0; CLASS_COUNT]; n_ramps],
            step: 0,
            detail: DetailLevel::Full,
            spacetime_stride: None,
            injected: 0.0,
            ejected: 0.0,
            initial_mass: 0.0,
            counts: Vec::new(),
            bottleneck_outflow: Vec::new(),
            demand_log: Vec::new(),
            command_log: Vec::new(),
            trajectory_log: Vec::new(),
            spacetime: Vec::new(),
            demands: vec![[0.0; CLASS_COUNT]; n],
            demand_tot: vec![0.0; n],
            capacity: vec![0.0; n],
            discharge: vec![0.0; n],
            supply: vec![0.0; n],
            flows: vec![[0.0; CLASS_COUNT]; n + 1],
            scenario,
        }
    }

    pub fn with_detail(mut self, detail: DetailLevel) -> Self {
        self.detail = detail;
        self
    }

    /// Record the total-density field every `stride` steps.
    pub fn with_spacetime(mut self, stride: u32) -> Self {
        self.spacetime_stride = Some(stride.max(1));
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn states(&self) -> &[CellState] {
        &self.states
    }

    /// Direct cell access for seeding test states; the mass ledger is
    /// re-based so conservation checks stay meaningful.
    pub fn states_mut(&mut self) -> &mut [CellState] {
        &mut self.states
    }

    pub fn platoons(&self) -> &[Platoon] {
        &self.platoons
    }

    pub fn platoons_mut(&mut self) -> &mut Vec<Platoon> {
        &mut self.platoons
    }

    /// Interface flows of the most recent step; entry `i` is the flow into
    /// cell `i`, entry `n` the road outflow (veh/h per class).
    pub fn last_flows(&self) -> &[[f64; CLASS_COUNT]] {
        &self.flows
    }

    pub fn current_step(&self) -> u32 {
        self.step
    }

    /// Vehicles in the system: on the road plus ramp and origin queues.
    /// Platoon mass still waiting at the boundary is not in the system yet.
    pub fn system_mass(&self) -> f64 {
        let cell_len = self.scenario.config().road.cell_length_km;
        let road: f64 = self
            .states
            .iter()
            .map(|s| s.total_density() * cell_len)
            .sum();
        let queues: f64 = self.origin_queue.iter().sum::<f64>()
            + self
                .ramp_queues
                .iter()
                .map(|q| q.iter().sum::<f64>())
                .sum::<f64>();
        road + queues
    }

    /// Relative mass-ledger error `|mass − (initial + in − out)| / max(1, mass)`.
    pub fn conservation_error(&self) -> f64 {
        let expected = self.initial_mass + self.injected - self.ejected;
        let actual = self.system_mass();
        (actual - expected).abs() / actual.abs().max(1.0)
    }

    /// Re-bases the ledger on the current state; call after seeding states.
    pub fn rebase_ledger(&mut self) {
        self.initial_mass = self.system_mass();
        self.injected = 0.0;
        self.ejected = 0.0;
    }

    fn draw_demand(&mut self) {
        let cfg = self.scenario.config();
        let mut uniform = |mean: f64, hw: f64| -> f64 {
            let u: f64 = self.rng_demand.gen();
            (mean + hw * (2.0 * u - 1.0)).max(0.0)
        };
        let d = &cfg.demand;
        self.draw_main = [0.0; CLASS_COUNT];
        self.draw_main[VehicleClass::Mainline.index()] =
            uniform(d.main_mainline.mean_vph, d.main_mainline.half_width_vph);
        self.draw_main[VehicleClass::OffRamp.index()] =
            uniform(d.main_offramp.mean_vph, d.main_offramp.half_width_vph);
        for (k, r) in d.onramp.iter().enumerate() {
            self.draw_onramp[k] = [0.0; CLASS_COUNT];
            self.draw_onramp[k][VehicleClass::Mainline.index()] =
                uniform(r.mainline.mean_vph, r.mainline.half_width_vph);
            self.draw_onramp[k][VehicleClass::OffRamp.index()] =
                uniform(r.offramp.mean_vph, r.offramp.half_width_vph);
        }
        self.demand_log.push(DemandRecord {
            step: self.step,
            main: self.draw_main,
            onramp: self.draw_onramp.clone(),
        });
    }

    fn spawn_due_platoon(&mut self) {
        if self.next_arrival >= self.arrivals.len() {
            return;
        }
        let now = self.step as f64 * self.scenario.config().time.step_h;
        let previous_entered = self
            .platoons
            .last()
            .map_or(true, |p| p.mass_to_enter <= 0.0);
        if self.arrivals[self.next_arrival].0 <= now + 1e-12 && previous_entered {
            let (_, speed) = self.arrivals[self.next_arrival];
            let size = self.scenario.config().platoon.size_pce;
            self.platoons
                .push(Platoon::new(self.next_platoon_id, size, speed));
            self.next_platoon_id += 1;
            self.next_arrival += 1;
        }
    }

    fn apply_commands(&mut self, action: &ControlAction) {
        for (p, cmd) in self.platoons.iter_mut().zip(&action.commands) {
            debug_assert_eq!(p.id, cmd.id);
            p.speed = cmd.speed;
            p.mode = cmd.lane;
        }
        if self.detail == DetailLevel::Full {
            for cmd in &action.commands {
                self.command_log.push(CommandRecord {
                    step: self.step,
                    platoon: cmd.id,
                    speed: cmd.speed,
                    lane: cmd.lane,
                    cap: cmd.cap,
                });
            }
        }
    }

    /// Advances one step.  Returns the error and leaves the state untouched
    /// when a density update would go meaningfully negative.
    pub fn step_once(&mut self) -> Result<(), EngineError> {
        let cfg = self.scenario.config();
        let dt = cfg.time.step_h;
        let cell_len = cfg.road.cell_length_km;
        let v = cfg.fd.free_flow_speed;
        let road_len = cfg.road.length_km;
        let offramp_caps: Vec<f64> = cfg.road.offramps.iter().map(|r| r.capacity_vph).collect();
        let sigma_l = self.scenario.sigma_lane();
        let n = self.states.len();
        let a = VehicleClass::Platoon.index();

        // 1. Demand redraw on the hold grid.
        if self.step % self.scenario.hold_steps() == 0 {
            self.draw_demand();
        }
        let factor = self.scenario.demand_factor(self.step);

        // 2. At most one platoon entry per step, FIFO, once the previous one
        // has fully flowed in.
        self.spawn_due_platoon();

        // 3. Control.
        let action = self
            .controller
            .act(&self.scenario, &self.states, &self.platoons, self.step as usize);
        self.apply_commands(&action);

        // 4. Speed fields: the platoon class always, the background mainline
        // class under ideal control.
        impose_platoon_field(&mut self.states, &self.platoons, cell_len, sigma_l, v);
        if let Some(limits) = &action.class_b_limits {
            let b = VehicleClass::Mainline.index();
            for (s, &u) in self.states.iter_mut().zip(limits) {
                s.speed[b] = u;
            }
        }

        // 5. Per-cell demands, capacities, discharge limits, supplies.
        for i in 0..n {
            let (d, d_tot) = class_demands(&self.params[i], &self.states[i]);
            self.demands[i] = d;
            self.demand_tot[i] = d_tot;
            self.capacity[i] = cell_capacity(&self.params[i], &self.states[i]);
            self.discharge[i] =
                capacity_drop_flow(&self.params[i], self.states[i].total_density());
        }
        self.supply[0] = aggregate_supply(
            &self.params[0],
            self.states[0].total_density(),
            self.capacity[0],
            f64::INFINITY,
        );
        for i in 1..n {
            self.supply[i] = aggregate_supply(
                &self.params[i],
                self.states[i].total_density(),
                self.capacity[i],
                self.discharge[i - 1],
            );
        }

        // 6. Boundary inflow from a ghost cell fed by the warm-scaled draw,
        // the origin queues, and the entering platoon.
        let entering = self.platoons.last().filter(|p| p.mass_to_enter > 0.0);
        let mut ghost_demand = [0.0; CLASS_COUNT];
        let mut ghost_rho = [0.0; CLASS_COUNT];
        for k in [VehicleClass::Mainline.index(), VehicleClass::OffRamp.index()] {
            ghost_demand[k] = self.draw_main[k] * factor + self.origin_queue[k] / dt;
            ghost_rho[k] = ghost_demand[k] / v;
        }
        if let Some(p) = entering {
            let rho_star = p.ref_density(sigma_l);
            ghost_demand[a] = (p.speed * rho_star).min(p.mass_to_enter / dt);
            ghost_rho[a] = rho_star;
        }
        self.flows[0] = interface_flows(&ghost_demand, &ghost_rho, self.supply[0]);

        // 7. Interior interfaces.
        for i in 1..n {
            self.flows[i] = interface_flows(
                &self.demands[i - 1],
                &self.states[i - 1].rho,
                self.supply[i],
            );
        }
        // Free outflow at the downstream end.
        self.flows[n] = self.demands[n - 1];

        // 8. Off-ramp exits: the off-ramp-bound class leaves the road at the
        // diverge instead of continuing downstream.
        let mut exits: Vec<(usize, [f64; CLASS_COUNT])> = Vec::new();
        let offramp_cells = self.scenario.offramp_cells().to_vec();
        for (k, &cell) in offramp_cells.iter().enumerate() {
            let ramp_cap = offramp_caps[k];
            let mut exiting = [false; CLASS_COUNT];
            exiting[VehicleClass::OffRamp.index()] = true;
            let s = offramp_flows(
                &self.demands[cell],
                &self.states[cell].rho,
                if cell + 1 < n {
                    self.supply[cell + 1]
                } else {
                    f64::INFINITY
                },
                ramp_cap,
                &exiting,
            );
            if cell + 1 <= n {
                self.flows[cell + 1][VehicleClass::OffRamp.index()] = 0.0;
            }
            exits.push((cell, s));
        }

        // 8b. Moving-bottleneck restriction: background traffic can pass a
        // platoon only at the rate the lanes it leaves open can carry, so
        // every interface inside a platoon body caps the combined flux of the
        // other classes at `v · (σ − ρ*)`, with `σ` taken from the narrower
        // side of the interface.
        for p in &self.platoons {
            let rho_star = p.ref_density(sigma_l);
            let tail = p.tail(sigma_l);
            let j_lo = ((tail / cell_len).floor() as i64 + 1).max(0);
            let j_hi = ((p.head / cell_len).floor() as i64).min(n as i64);
            for j in j_lo..=j_hi {
                let j = j as usize;
                let sigma_if = if j == 0 {
                    self.params[0].sigma
                } else if j == n {
                    self.params[n - 1].sigma
                } else {
                    self.params[j - 1].sigma.min(self.params[j].sigma)
                };
                let cap = (v * (sigma_if - rho_star)).max(0.0);
                let passing: f64 = self.flows[j]
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c != a)
                    .map(|(_, q)| *q)
                    .sum();
                if passing > cap {
                    let scale = if passing > FLOW_EPS { cap / passing } else { 0.0 };
                    for (c, q) in self.flows[j].iter_mut().enumerate() {
                        if c != a {
                            *q *= scale;
                        }
                    }
                }
            }
        }

        // 9. On-ramp admission against the merge cell's residual supply.
        let mut merges: Vec<(usize, [f64; CLASS_COUNT])> = Vec::new();
        let onramp_cells = self.scenario.onramp_cells().to_vec();
        for (k, &cell) in onramp_cells.iter().enumerate() {
            let mut arrivals_rate = [0.0; CLASS_COUNT];
            for c in 0..CLASS_COUNT {
                arrivals_rate[c] = self.draw_onramp[k][c] * factor;
            }
            let prioritized = {
                let mut p = [false; CLASS_COUNT];
                p[a] = true;
                p
            };
            let upstream_demand = if cell > 0 {
                self.demand_tot[cell - 1]
            } else {
                0.0
            };
            let residual = onramp_residual(self.supply[cell], upstream_demand, 0.0);
            let mut inflow = crate::mcctm::allocate_onramp(
                residual,
                &arrivals_rate,
                &self.ramp_queues[k],
                dt,
                &prioritized,
            );
            // Safety: total inflow to the merge cell never exceeds its supply.
            let mainline_in: f64 = self.flows[cell].iter().sum();
            let ramp_in: f64 = inflow.iter().sum();
            let room = (self.supply[cell] - mainline_in).max(0.0);
            if ramp_in > room {
                let scale = if ramp_in > 0.0 { room / ramp_in } else { 0.0 };
                for q in inflow.iter_mut() {
                    *q *= scale;
                }
            }
            for c in 0..CLASS_COUNT {
                self.ramp_queues[k][c] =
                    (self.ramp_queues[k][c] + (arrivals_rate[c] - inflow[c]) * dt).max(0.0);
                self.injected += arrivals_rate[c] * dt;
            }
            merges.push((cell, inflow));
        }

        // Origin ledger: the drawn demand enters the system (road or origin
        // queue); platoon mass enters only as it flows in.
        for k in [VehicleClass::Mainline.index(), VehicleClass::OffRamp.index()] {
            self.injected += self.draw_main[k] * factor * dt;
            self.origin_queue[k] =
                (self.origin_queue[k] + (self.draw_main[k] * factor - self.flows[0][k]) * dt)
                    .max(0.0);
        }
        self.injected += self.flows[0][a] * dt;
        if let Some(p) = self.platoons.last_mut() {
            if p.mass_to_enter > 0.0 {
                p.mass_to_enter = (p.mass_to_enter - self.flows[0][a] * dt).max(0.0);
            }
        }

        // 10. Conservative density update.
        let ratio = dt / cell_len;
        for i in 0..n {
            let mut delta = [0.0; CLASS_COUNT];
            for c in 0..CLASS_COUNT {
                delta[c] = self.flows[i][c] - self.flows[i + 1][c];
            }
            for (cell, r) in &merges {
                if *cell == i {
                    for c in 0..CLASS_COUNT {
                        delta[c] += r[c];
                    }
                }
            }
            for (cell, s) in &exits {
                if *cell == i {
                    for c in 0..CLASS_COUNT {
                        delta[c] -= s[c];
                    }
                }
            }
            for c in 0..CLASS_COUNT {
                let next = self.states[i].rho[c] + ratio * delta[c];
                if next < -NEG_DENSITY_TOL {
                    return Err(EngineError::NegativeDensity {
                        step: self.step,
                        cell: i,
                        class: c,
                        density: next,
                    });
                }
                self.states[i].rho[c] = next.max(0.0);
            }
        }
        for c in 0..CLASS_COUNT {
            self.ejected += self.flows[n][c] * dt;
        }
        for (_, s) in &exits {
            for c in 0..CLASS_COUNT {
                self.ejected += s[c] * dt;
            }
        }

        // 11. Advance platoons; a follower's head never passes the tail of
        // the platoon ahead.  Fully passed platoons retire.
        let mut prev_tail: Option<f64> = None;
        for p in self.platoons.iter_mut() {
            let mut new_head = p.head + p.speed * dt;
            if let Some(tail) = prev_tail {
                new_head = new_head.min(tail);
            }
            p.head = new_head;
            prev_tail = Some(p.tail(sigma_l));
        }
        self.platoons.retain(|p| p.tail(sigma_l) < road_len);

        // 12. Metrics.
        let mut count = [0.0; CLASS_COUNT];
        for s in &self.states {
            for c in 0..CLASS_COUNT {
                count[c] += s.rho[c] * cell_len;
            }
        }
        for c in 0..CLASS_COUNT {
            count[c] += self.origin_queue[c];
            for q in &self.ramp_queues {
                count[c] += q[c];
            }
        }
        self.counts.push(count);
        let i_b = self.scenario.first_reduced_cell();
        self.bottleneck_outflow
            .push(self.flows[i_b].iter().sum());
        if self.detail == DetailLevel::Full {
            for p in &self.platoons {
                self.trajectory_log.push(TrajectoryRecord {
                    step: self.step,
                    platoon: p.id,
                    head_km: p.head,
                    speed: p.speed,
                });
            }
        }
        if let Some(stride) = self.spacetime_stride {
            if self.step % stride == 0 {
                self.spacetime.push((
                    self.step,
                    self.states.iter().map(|s| s.total_density()).collect(),
                ));
            }
        }

        self.step += 1;
        Ok(())
    }

    /// Runs the configured horizon and returns the collected records.
    pub fn run(mut self) -> Result<RunOutput, EngineError> {
        let total = self.scenario.config().time.total_steps;
        while self.step < total {
            self.step_once()?;
        }
        Ok(RunOutput {
            dt_h: self.scenario.config().time.step_h,
            counts: self.counts,
            bottleneck_outflow: self.bottleneck_outflow,
            arrivals: self.arrivals,
            demand_log: self.demand_log,
            commands: self.command_log,
            trajectories: self.trajectory_log,
            spacetime: self.spacetime,
            injected: self.injected,
            ejected: self.ejected,
            final_mass: {
                let cell_len = self.scenario.config().road.cell_length_km;
                let road: f64 = self
                    .states
                    .iter()
                    .map(|s| s.total_density() * cell_len)
                    .sum();
                let queues: f64 = self.origin_queue.iter().sum::<f64>()
                    + self
                        .ramp_queues
                        .iter()
                        .map(|q| q.iter().sum::<f64>())
                        .sum::<f64>();
                road + queues
            },
        })
    }
}
