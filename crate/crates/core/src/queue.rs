//! Point-queue model of the lane-drop bottleneck and the moving restrictions
//! created by slow platoons, used for fast rollout of candidate plans.
//!
//! The model tracks a single queue `n_b` at the bottleneck plus one trapped
//! queue per platoon still on its way there. All flows are expressed on a
//! common "label clock": label time `t` indexes traffic by the instant it
//! would cross the bottleneck if it travelled at the free-flow speed from the
//! moment of the snapshot. On that clock every station (on-ramp, off-ramp,
//! platoon) acts as a pointwise transformation of one scalar flow profile,
//! which makes a full horizon rollout O(steps × stations).
//!
//! The integrator is explicit Euler on the simulation step; discrete events
//! (platoon reaching the bottleneck, platoon passing an off-ramp) are snapped
//! to step boundaries.

use crate::mcctm::{build_cells, discharge_constants, CellState, DischargeConstants};
use crate::platoon::Platoon;
use crate::scenario::Scenario;
use crate::VehicleClass;

fn bottleneck_discharge(scenario: &Scenario) -> DischargeConstants {
    let cells = build_cells(scenario);
    discharge_constants(&cells[scenario.last_full_cell()])
        .expect("scenario validation guarantees a narrowing bottleneck")
}

/// Queues below this many vehicles are treated as empty.
pub const QUEUE_EPS: f64 = 1e-9;
/// A cell counts as congested when its total density exceeds the critical
/// density by this margin (veh/km).
pub const CONGESTION_MARGIN: f64 = 1.0;

/// Errors from queue-model bookkeeping.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QueueError {
    /// A stopped platoon never reaches the bottleneck, so its arrival time
    /// is undefined.
    #[error("platoon speed is zero; arrival time undefined")]
    ZeroSpeed,
}

/// Scalar constants of the bottleneck shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueConstants {
    /// Free-flow speed V (km/h).
    pub free_speed: f64,
    /// Upstream face of the first reduced-capacity cell (km).
    pub bottleneck_position: f64,
    /// Capacity of the reduced section before any drop (veh/h).
    pub bottleneck_capacity: f64,
    /// Outflow while the bottleneck is congested (veh/h).
    pub discharge_flow: f64,
    /// High cap released to a platoon when the bottleneck is clear (veh/h).
    pub cap_high: f64,
    /// Low cap held while the bottleneck still has to drain (veh/h).
    pub cap_low: f64,
    /// Critical density of a single lane (veh/km), used for passage flow.
    pub lane_critical_density: f64,
    /// Integration step (h).
    pub step_h: f64,
}

impl QueueConstants {
    /// Derives the constants from a scenario: the high cap equals the reduced
    /// section's capacity and the low cap is the flow that still passes a
    /// full-width slow vehicle in the wide section.
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let cfg = scenario.config();
        let v = cfg.fd.free_flow_speed;
        let dc = bottleneck_discharge(scenario);
        QueueConstants {
            free_speed: v,
            bottleneck_position: scenario.cell_start(scenario.first_reduced_cell()),
            bottleneck_capacity: scenario.bottleneck_capacity(),
            discharge_flow: dc.discharge_flow,
            cap_high: scenario.bottleneck_capacity(),
            cap_low: v * (scenario.sigma_full() - 2.0 * scenario.sigma_lane()),
            lane_critical_density: scenario.sigma_lane(),
            step_h: cfg.time.step_h,
        }
    }
}

/// Mean upstream inflow by demand phase, used once the rollout outruns the
/// traffic that was already on the road at the snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryForecast {
    /// Mean total inflow at the upstream boundary during the main phase (veh/h).
    pub mean_vph: f64,
    /// Multiplier applied outside the main phase.
    pub warm_factor: f64,
    /// Absolute end of the reduced-inflow start phase (h).
    pub warmup_end_h: f64,
    /// Absolute start of the reduced-inflow final phase (h).
    pub cooldown_start_h: f64,
}

impl BoundaryForecast {
    fn factor_at(&self, t_abs: f64) -> f64 {
        if t_abs < self.warmup_end_h || t_abs >= self.cooldown_start_h {
            self.warm_factor
        } else {
            1.0
        }
    }

    /// Forecast inflow at an absolute simulation time.
    pub fn flow_at(&self, t_abs: f64) -> f64 {
        self.mean_vph * self.factor_at(t_abs)
    }
}

/// Where the background flow marching toward the bottleneck comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InflowSource {
    /// Fixed inflow at all label times (used by idealized analyses).
    Constant(f64),
    /// Densities frozen at the snapshot plus a boundary forecast for label
    /// times whose traffic had not yet entered the road.
    Snapshot {
        /// Background (non-platoon) density per cell (veh/km).
        rho: Vec<f64>,
        cell_length: f64,
        /// Absolute time of the snapshot (h).
        epoch_h: f64,
        forecast: BoundaryForecast,
    },
}

impl InflowSource {
    /// Flow labelled `t` on its way to the bottleneck at `x_b`.
    fn flow(&self, t: f64, x_b: f64, v: f64) -> f64 {
        match self {
            InflowSource::Constant(q) => *q,
            InflowSource::Snapshot {
                rho,
                cell_length,
                epoch_h,
                forecast,
            } => {
                let foot = x_b - v * t;
                if foot >= 0.0 {
                    let idx = ((foot / cell_length - 1e-9).floor().max(0.0)) as usize;
                    v * rho[idx.min(rho.len() - 1)]
                } else {
                    forecast.flow_at(epoch_h + t - x_b / v)
                }
            }
        }
    }

    /// Demand-phase multiplier for a ramp whose flow labelled `t` joined the
    /// road `gate` hours before reaching the bottleneck.
    fn ramp_factor(&self, t: f64, gate: f64) -> f64 {
        match self {
            InflowSource::Constant(_) => 1.0,
            InflowSource::Snapshot {
                epoch_h, forecast, ..
            } => forecast.factor_at(epoch_h + t - gate),
        }
    }
}

/// Cap policy attached to one platoon during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapPolicy {
    /// Evaluate the release law every step.
    Law,
    /// Hold a fixed cap (used for platoons whose plan is already committed).
    Fixed(f64),
}

/// One platoon as seen by the queue model.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuePlatoon {
    pub id: u64,
    /// Head position when the platoon starts being tracked (km).
    pub position: f64,
    /// Commanded speed (km/h).
    pub speed: f64,
    /// Physical length (km).
    pub length: f64,
    /// Mass of the platoon itself (PCE).
    pub size: f64,
    /// Traffic already trapped behind the platoon (veh).
    pub queue: f64,
    pub policy: CapPolicy,
    /// Label time at which the platoon starts impeding marching flow (h).
    pub entry_time: f64,
    /// Label time at which the head reaches the bottleneck (h).
    pub arrival_time: f64,
}

impl QueuePlatoon {
    /// Platoon on the road at the snapshot.
    pub fn new(
        id: u64,
        position: f64,
        speed: f64,
        length: f64,
        size: f64,
        queue: f64,
        x_b: f64,
        v: f64,
    ) -> Result<Self, QueueError> {
        let (entry_time, arrival_time) = event_times(position, speed, x_b, v)?;
        Ok(QueuePlatoon {
            id,
            position,
            speed,
            length,
            size,
            queue,
            policy: CapPolicy::Law,
            entry_time,
            arrival_time,
        })
    }

    /// Platoon that enters the road at `position` only at absolute offset
    /// `offset_h` after the snapshot.
    pub fn entering_later(
        id: u64,
        offset_h: f64,
        speed: f64,
        length: f64,
        size: f64,
        x_b: f64,
        v: f64,
    ) -> Result<Self, QueueError> {
        let mut p = QueuePlatoon::new(id, 0.0, speed, length, size, 0.0, x_b, v)?;
        p.entry_time += offset_h;
        p.arrival_time += offset_h;
        Ok(p)
    }

    /// Position at which flow labelled `t` meets the platoon head, clamped to
    /// the stretch the platoon actually covers.
    pub fn meeting_position(&self, t: f64, x_b: f64, v: f64) -> f64 {
        if self.speed >= v - 1e-9 {
            return if t > self.entry_time { x_b } else { self.position };
        }
        let raw = self.position + self.speed * v * (t - self.entry_time) / (v - self.speed);
        raw.clamp(self.position.min(x_b), x_b)
    }

    /// Label time at which the head passes a fixed position `x` (valid for
    /// `x` ahead of the starting position).
    fn crossing_time(&self, x: f64, v: f64) -> f64 {
        self.entry_time + (x - self.position) * (v - self.speed) / (self.speed * v)
    }
}

/// Time the platoon position starts shadowing marching flow and the time its
/// head reaches the bottleneck, both on the label clock.
pub fn event_times(position: f64, speed: f64, x_b: f64, v: f64) -> Result<(f64, f64), QueueError> {
    if speed <= 0.0 {
        return Err(QueueError::ZeroSpeed);
    }
    Ok(((x_b - position) / v, (x_b - position) / speed))
}

/// Position whose free-flow characteristic meets the platoon at `t`, in the
/// platoon's own clock (zero when the characteristic through its starting
/// position arrives). For a platoon moving at the free-flow speed the
/// characteristics are parallel and the starting position is returned.
pub fn upstream_tail_position(position: f64, speed: f64, v: f64, t: f64) -> f64 {
    if speed >= v - 1e-9 {
        return position;
    }
    (speed * v * t + v * position - speed * position) / (v - speed)
}

/// Converts an interval on the label clock to the platoon-local clock that
/// runs from zero (tracking start) to the arrival time.
pub fn to_platoon_clock(t: f64, entry_time: f64, speed: f64, v: f64) -> f64 {
    (t - entry_time) * v / (v - speed)
}

/// Inverse of [`to_platoon_clock`].
pub fn from_platoon_clock(tau: f64, entry_time: f64, speed: f64, v: f64) -> f64 {
    entry_time + tau * (v - speed) / v
}

/// A ramp as seen by the queue model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampStation {
    pub position: f64,
    pub kind: RampKind,
}

/// Ramp behaviour: on-ramps add a mean inflow, off-ramps divert a fixed share
/// of whatever feeds them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RampKind {
    On { mean_vph: f64 },
    Off { split_ratio: f64 },
}

/// Extra passage interval at the bottleneck from a platoon that is already
/// (partly) inside the reduced section at the snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassageWindow {
    pub start: f64,
    pub end: f64,
    pub flow_vph: f64,
}

/// Which ramps feed the bottleneck queue and each platoon queue at label `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RampSets {
    /// Indices of ramps whose flow reaches the bottleneck directly.
    pub bottleneck: Vec<usize>,
    /// Per platoon (same order as the input), ramps feeding its trapped queue.
    pub per_platoon: Vec<Vec<usize>>,
}

/// Evaluates the ramp index sets at label `t`. A ramp is active only once
/// traffic joining it after the snapshot can have reached the receiver
/// (`t ≥ (x_b − X_k)/v`), and it feeds the nearest queue downstream of its
/// position at that label time.
pub fn ramp_sets(
    t: f64,
    platoons: &[QueuePlatoon],
    ramps: &[RampStation],
    x_b: f64,
    v: f64,
) -> RampSets {
    let gate_ok = |k: &RampStation| t >= (x_b - k.position) / v;
    // Nearest platoon still shielding the bottleneck: earliest arrival among
    // those that are active and not yet arrived.
    let nearest = platoons
        .iter()
        .position(|p| t >= p.entry_time && t <= p.arrival_time);
    let lower_for_bottleneck = match nearest {
        Some(i) => platoons[i].meeting_position(t, x_b, v),
        None => x_b - v * t,
    };
    let bottleneck = ramps
        .iter()
        .enumerate()
        .filter(|(_, k)| gate_ok(k) && lower_for_bottleneck < k.position && k.position <= x_b)
        .map(|(i, _)| i)
        .collect();
    let per_platoon = platoons
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let upper = p.meeting_position(t, x_b, v);
            let lower = match platoons.get(i + 1) {
                Some(f) if t > f.entry_time => f.meeting_position(t, x_b, v),
                _ => x_b - v * t,
            };
            ramps
                .iter()
                .enumerate()
                .filter(|(_, k)| gate_ok(k) && lower < k.position && k.position <= upper)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    RampSets {
        bottleneck,
        per_platoon,
    }
}

#[derive(Debug, Clone)]
struct StationState {
    def: QueuePlatoon,
    queue: f64,
    merged: bool,
    merge_time: Option<f64>,
    crossed: Vec<bool>,
}

/// Rollout state machine. Clone it to branch a candidate plan.
#[derive(Debug, Clone)]
pub struct QueueSim {
    constants: QueueConstants,
    source: InflowSource,
    stations: Vec<StationState>,
    ramps: Vec<RampStation>,
    extra_windows: Vec<PassageWindow>,
    bottleneck_queue: f64,
    include_passage_windows: bool,
    protected_release: bool,
    time: f64,
    // Scratch reused every step: (position, station kind).
    order: Vec<(f64, StationRef)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum StationRef {
    Ramp(usize),
    Platoon(usize),
}

/// One integration step's bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// Label time at the start of the step.
    pub time: f64,
    pub inflow: f64,
    pub outflow: f64,
    pub bottleneck_queue: f64,
}

impl QueueSim {
    pub fn new(constants: QueueConstants, source: InflowSource) -> Self {
        QueueSim {
            constants,
            source,
            stations: Vec::new(),
            ramps: Vec::new(),
            extra_windows: Vec::new(),
            bottleneck_queue: 0.0,
            include_passage_windows: true,
            protected_release: false,
            time: 0.0,
            order: Vec::new(),
        }
    }

    pub fn with_bottleneck_queue(mut self, n0: f64) -> Self {
        self.bottleneck_queue = n0;
        self
    }

    pub fn with_ramps(mut self, ramps: Vec<RampStation>) -> Self {
        self.ramps = ramps;
        for s in &mut self.stations {
            s.crossed = vec![false; self.ramps.len()];
        }
        self
    }

    /// Enables the release branch that uncaps a platoon while a protected
    /// off-ramp lies between it and its predecessor.
    pub fn with_protected_release(mut self, on: bool) -> Self {
        self.protected_release = on;
        self
    }

    /// Disables the extra bottleneck passage flow counted while a platoon
    /// traverses the reduced section.
    pub fn with_passage_windows(mut self, on: bool) -> Self {
        self.include_passage_windows = on;
        self
    }

    pub fn with_platoons(mut self, platoons: Vec<QueuePlatoon>) -> Self {
        for p in platoons {
            self.add_platoon(p);
        }
        self
    }

    pub fn with_extra_windows(mut self, windows: Vec<PassageWindow>) -> Self {
        self.extra_windows = windows;
        self
    }

    /// Inserts a platoon keeping stations ordered by arrival time.
    pub fn add_platoon(&mut self, p: QueuePlatoon) {
        let crossed = vec![false; self.ramps.len()];
        let at = self
            .stations
            .partition_point(|s| s.def.arrival_time <= p.arrival_time);
        self.stations.insert(
            at,
            StationState {
                queue: p.queue,
                def: p,
                merged: false,
                merge_time: None,
                crossed,
            },
        );
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn bottleneck_queue(&self) -> f64 {
        self.bottleneck_queue
    }

    /// (id, trapped queue, merged) per platoon in arrival order.
    pub fn constants(&self) -> &QueueConstants {
        &self.constants
    }

    pub fn platoon_states(&self) -> impl Iterator<Item = (u64, f64, bool)> + '_ {
        self.stations.iter().map(|s| (s.def.id, s.queue, s.merged))
    }

    pub fn platoon_queue(&self, id: u64) -> Option<f64> {
        self.stations
            .iter()
            .find(|s| s.def.id == id)
            .map(|s| s.queue)
    }

    fn passage_flow(&self, t: f64) -> f64 {
        if !self.include_passage_windows {
            return 0.0;
        }
        let v = self.constants.free_speed;
        let mut q = 0.0;
        for s in &self.stations {
            if s.merged {
                let start = s.def.arrival_time;
                if t >= start && t < start + s.def.length / v {
                    q += s.def.speed * self.constants.lane_critical_density;
                }
            }
        }
        for w in &self.extra_windows {
            if t >= w.start && t < w.end {
                q += w.flow_vph;
            }
        }
        q
    }

    /// Release law for platoon `idx` (stations sorted by arrival). `caps`
    /// holds the values already computed for earlier-arriving platoons this
    /// step.
    fn law_cap(&self, idx: usize, t: f64, passage_now: f64, caps: &[f64]) -> f64 {
        let c = &self.constants;
        let pred_arrived = idx == 0 || t >= self.stations[idx - 1].def.arrival_time;
        if self.bottleneck_queue <= QUEUE_EPS && pred_arrived {
            return c.cap_high - passage_now;
        }
        if idx > 0 && t < self.stations[idx - 1].def.arrival_time {
            let pred = &self.stations[idx - 1];
            if self.protected_release {
                let v = c.free_speed;
                let upper = pred.def.meeting_position(t, c.bottleneck_position, v);
                let lower = self.stations[idx].def.meeting_position(
                    t,
                    c.bottleneck_position,
                    v,
                );
                let released = self.ramps.iter().any(|r| {
                    matches!(r.kind, RampKind::Off { .. })
                        && t >= (c.bottleneck_position - r.position) / v
                        && lower < r.position
                        && r.position <= upper
                });
                if released {
                    return c.cap_high;
                }
            }
            if pred.queue <= QUEUE_EPS {
                return caps[idx - 1];
            }
        }
        c.cap_low
    }

    /// Cap each platoon is held to at label `t` (arrival order).
    pub fn caps_at(&self, t: f64) -> Vec<f64> {
        let passage_now = self.passage_flow(t);
        let mut caps = Vec::with_capacity(self.stations.len());
        for i in 0..self.stations.len() {
            let cap = match self.stations[i].def.policy {
                CapPolicy::Fixed(q) => q,
                CapPolicy::Law => self.law_cap(i, t, passage_now, &caps),
            };
            caps.push(cap);
        }
        caps
    }

    /// Advances one step and reports the bottleneck flows of that step.
    pub fn advance(&mut self) -> StepRecord {
        self.advance_recording(&mut Vec::new(), &mut Vec::new())
    }

    fn advance_recording(
        &mut self,
        cap_row: &mut Vec<f64>,
        ramp_row: &mut Vec<f64>,
    ) -> StepRecord {
        let c = self.constants;
        let t = self.time;
        let dt = c.step_h;
        let v = c.free_speed;
        let x_b = c.bottleneck_position;

        let passage_now = self.passage_flow(t);
        let caps = self.caps_at(t);
        cap_row.clear();
        cap_row.extend_from_slice(&caps);

        // Stations ordered upstream → downstream at this label time.
        self.order.clear();
        for (k, r) in self.ramps.iter().enumerate() {
            self.order.push((r.position, StationRef::Ramp(k)));
        }
        for (i, s) in self.stations.iter().enumerate() {
            if !s.merged && t >= s.def.entry_time {
                self.order
                    .push((s.def.meeting_position(t, x_b, v), StationRef::Platoon(i)));
            }
        }
        let mut order = std::mem::take(&mut self.order);
        order.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| match (a.1, b.1) {
                    (StationRef::Ramp(x), StationRef::Ramp(y)) => x.cmp(&y),
                    (StationRef::Ramp(_), StationRef::Platoon(_)) => std::cmp::Ordering::Less,
                    (StationRef::Platoon(_), StationRef::Ramp(_)) => std::cmp::Ordering::Greater,
                    // Positions tie when both clamp at the bottleneck; the
                    // later-arriving platoon is physically further upstream
                    // and must see the flow first.
                    (StationRef::Platoon(x), StationRef::Platoon(y)) => y.cmp(&x),
                })
        });

        ramp_row.clear();
        ramp_row.resize(self.ramps.len(), 0.0);
        let mut f = self.source.flow(t, x_b, v);
        for &(_, station) in &order {
            match station {
                StationRef::Ramp(k) => {
                    let ramp = self.ramps[k];
                    let gate = (x_b - ramp.position) / v;
                    if t < gate {
                        continue;
                    }
                    match ramp.kind {
                        RampKind::On { mean_vph } => {
                            let add = mean_vph * self.source.ramp_factor(t, gate);
                            f += add;
                            ramp_row[k] = add;
                        }
                        RampKind::Off { split_ratio } => {
                            let out = split_ratio * f;
                            f -= out;
                            ramp_row[k] = -out;
                        }
                    }
                }
                StationRef::Platoon(i) => {
                    let cap = caps[i];
                    let s = &mut self.stations[i];
                    let q_in = f;
                    let q_out = if q_in <= cap && s.queue <= QUEUE_EPS {
                        q_in
                    } else {
                        cap.min(q_in + s.queue / dt)
                    };
                    s.queue = (s.queue + (q_in - q_out) * dt).max(0.0);
                    f = q_out;
                }
            }
        }
        self.order = order;

        let q_b_in = f + passage_now;
        let q_b_out = if q_b_in <= c.bottleneck_capacity && self.bottleneck_queue <= QUEUE_EPS {
            q_b_in
        } else {
            c.discharge_flow.min(q_b_in + self.bottleneck_queue / dt)
        };
        self.bottleneck_queue = (self.bottleneck_queue + (q_b_in - q_b_out) * dt).max(0.0);

        let t_next = t + dt;

        // Off-ramp crossings first (they happen strictly before arrival),
        // then arrivals.
        for i in 0..self.stations.len() {
            for (k, ramp) in self.ramps.iter().enumerate() {
                let RampKind::Off { split_ratio } = ramp.kind else {
                    continue;
                };
                let s = &mut self.stations[i];
                if s.merged || s.crossed[k] || ramp.position <= s.def.position {
                    continue;
                }
                if s.def.crossing_time(ramp.position, v) <= t_next + 1e-12 {
                    s.crossed[k] = true;
                    s.queue *= 1.0 - split_ratio;
                }
            }
        }
        for s in &mut self.stations {
            if !s.merged && s.def.arrival_time <= t_next + 1e-12 {
                s.merged = true;
                s.merge_time = Some(s.def.arrival_time);
                // The platoon's own vehicles queue only when they meet
                // congestion — either already at the bottleneck or carried
                // in with them; into free flow they pass without queuing.
                let jump = s.queue
                    + if self.bottleneck_queue > QUEUE_EPS || s.queue > QUEUE_EPS {
                        s.def.size
                    } else {
                        0.0
                    };
                self.bottleneck_queue += jump;
                s.queue = 0.0;
            }
        }

        self.time = t_next;
        StepRecord {
            time: t,
            inflow: q_b_in,
            outflow: q_b_out,
            bottleneck_queue: self.bottleneck_queue,
        }
    }

    /// Runs to `horizon` collecting full trajectories.
    pub fn run(mut self, horizon: f64) -> Prediction {
        let dt = self.constants.step_h;
        let n = (horizon / dt).ceil() as usize;
        let mut out = Prediction {
            step_h: dt,
            times: Vec::with_capacity(n),
            bottleneck_queue: Vec::with_capacity(n),
            inflow: Vec::with_capacity(n),
            outflow: Vec::with_capacity(n),
            platoons: self
                .stations
                .iter()
                .map(|s| PlatoonTrace {
                    id: s.def.id,
                    queue: Vec::with_capacity(n),
                    cap: Vec::with_capacity(n),
                    merge_time: None,
                })
                .collect(),
            ramp_flows: vec![Vec::with_capacity(n); self.ramps.len()],
            clearance_time: None,
        };
        let mut cap_row = Vec::new();
        let mut ramp_row = Vec::new();
        for _ in 0..n {
            let rec = self.advance_recording(&mut cap_row, &mut ramp_row);
            out.times.push(rec.time);
            out.inflow.push(rec.inflow);
            out.outflow.push(rec.outflow);
            out.bottleneck_queue.push(rec.bottleneck_queue);
            for (trace, s) in out.platoons.iter_mut().zip(&self.stations) {
                trace.queue.push(s.queue);
                trace.merge_time = s.merge_time;
            }
            for (i, trace) in out.platoons.iter_mut().enumerate() {
                trace.cap.push(cap_row.get(i).copied().unwrap_or(f64::NAN));
            }
            for (series, &q) in out.ramp_flows.iter_mut().zip(ramp_row.iter()) {
                series.push(q);
            }
        }
        out.clearance_time = clearance_from_series(&out.times, &out.bottleneck_queue, dt);
        out
    }
}

fn clearance_from_series(times: &[f64], n_b: &[f64], dt: f64) -> Option<f64> {
    let last_positive = n_b.iter().rposition(|&q| q > QUEUE_EPS);
    match last_positive {
        None => Some(0.0),
        Some(i) if i + 1 == n_b.len() => None,
        Some(i) => Some(times[i + 1] + dt),
    }
}

/// Trajectory of one platoon over a rollout.
#[derive(Debug, Clone)]
pub struct PlatoonTrace {
    pub id: u64,
    /// Trapped queue after each step (veh).
    pub queue: Vec<f64>,
    /// Cap the platoon was held to at each step (veh/h).
    pub cap: Vec<f64>,
    pub merge_time: Option<f64>,
}

/// Full rollout output.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub step_h: f64,
    /// Label time at the start of each step.
    pub times: Vec<f64>,
    /// Bottleneck queue after each step (veh).
    pub bottleneck_queue: Vec<f64>,
    /// Flow reaching the bottleneck each step (veh/h).
    pub inflow: Vec<f64>,
    /// Flow leaving the bottleneck each step (veh/h).
    pub outflow: Vec<f64>,
    pub platoons: Vec<PlatoonTrace>,
    /// Signed flow at each ramp station (on-ramps positive).
    pub ramp_flows: Vec<Vec<f64>>,
    /// First label time after which the bottleneck queue stays empty.
    pub clearance_time: Option<f64>,
}

impl Prediction {
    /// Index of the step covering label time `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.step_h) as usize).min(self.times.len().saturating_sub(1))
    }

    /// Largest bottleneck queue over label interval `[from, to]`.
    pub fn max_bottleneck_queue(&self, from: f64, to: f64) -> f64 {
        let a = self.index_of(from);
        let b = self.index_of(to);
        self.bottleneck_queue[a..=b]
            .iter()
            .fold(0.0_f64, |m, &q| m.max(q))
    }
}

/// State extracted from the cell simulation for a rollout.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub source: InflowSource,
    pub bottleneck_queue: f64,
    pub platoons: Vec<QueuePlatoon>,
    pub extra_windows: Vec<PassageWindow>,
}

/// Builds the queue-model state from the current cell densities.
///
/// Excess mass above the discharge density in the congested block touching
/// the lane drop becomes the bottleneck queue; excess mass in congested
/// blocks directly behind each platoon becomes that platoon's trapped queue.
/// Cells accounted this way enter the marching profile at no more than the
/// discharge density so their mass is not counted twice.
pub fn snapshot_from_ctm(
    scenario: &Scenario,
    states: &[CellState],
    platoons: &[Platoon],
    epoch_h: f64,
) -> Snapshot {
    let cfg = scenario.config();
    let v = cfg.fd.free_flow_speed;
    let cell_len = cfg.road.cell_length_km;
    let sigma_l = scenario.sigma_lane();
    let x_b = scenario.cell_start(scenario.first_reduced_cell());
    let rho_d = bottleneck_discharge(scenario).discharge_density;
    let n_cells = scenario.n_cells();

    let total = |i: usize| -> f64 { states[i].total_density() };
    let background = |i: usize| -> f64 {
        states[i].rho[VehicleClass::Mainline.index()]
            + states[i].rho[VehicleClass::OffRamp.index()]
    };
    let congested = |i: usize| -> bool {
        total(i) > sigma_l * scenario.lanes(i) as f64 + CONGESTION_MARGIN
    };

    // Cells covered by a platoon body belong to the platoon, not to a queue.
    let body_cell = |i: usize| -> bool {
        platoons.iter().any(|p| {
            let head = scenario.cell_of_position(p.head.max(1e-12));
            let tail = scenario.cell_of_position(p.tail(sigma_l).max(1e-12));
            i >= tail && i <= head && p.head > 0.0
        })
    };

    let mut in_queue = vec![false; n_cells];
    let mut bottleneck_queue = 0.0;
    let mut i = scenario.last_full_cell() as isize;
    while i >= 0 && congested(i as usize) && !body_cell(i as usize) {
        bottleneck_queue += (total(i as usize) - rho_d) * cell_len;
        in_queue[i as usize] = true;
        i -= 1;
    }

    let mut by_position: Vec<&Platoon> = platoons.iter().filter(|p| p.head < x_b).collect();
    by_position.sort_by(|a, b| b.head.partial_cmp(&a.head).unwrap());
    let mut queue_platoons = Vec::new();
    for p in &by_position {
        let tail_cell = scenario.cell_of_position(p.tail(sigma_l).max(1e-12));
        let mut trapped = 0.0;
        if p.tail(sigma_l) > 0.0 && tail_cell > 0 {
            let mut j = tail_cell as isize - 1;
            while j >= 0 && congested(j as usize) && !body_cell(j as usize) {
                if in_queue[j as usize] {
                    break;
                }
                trapped += (background(j as usize) - rho_d).max(0.0) * cell_len;
                in_queue[j as usize] = true;
                j -= 1;
            }
        }
        queue_platoons.push(
            QueuePlatoon::new(
                p.id,
                p.head,
                p.speed,
                p.length(sigma_l),
                p.size,
                trapped,
                x_b,
                v,
            )
            .expect("live platoons have positive speed"),
        );
    }

    let extra_windows = platoons
        .iter()
        .filter(|p| p.head >= x_b)
        .filter_map(|p| {
            let t_u = (x_b - p.head) / p.speed;
            let end = t_u + p.length(sigma_l) / v;
            (end > 0.0).then_some(PassageWindow {
                start: t_u.max(0.0),
                end,
                flow_vph: p.speed * sigma_l,
            })
        })
        .collect();

    let rho = (0..n_cells)
        .map(|i| {
            if in_queue[i] {
                background(i).min(rho_d)
            } else {
                background(i)
            }
        })
        .collect();

    let horizon = cfg.time.horizon_h();
    let forecast = BoundaryForecast {
        mean_vph: cfg.demand.main_mainline.mean_vph + cfg.demand.main_offramp.mean_vph,
        warm_factor: cfg.demand.warm_factor,
        warmup_end_h: cfg.time.warmup_steps as f64 * cfg.time.step_h,
        cooldown_start_h: horizon - cfg.time.cooldown_steps as f64 * cfg.time.step_h,
    };

    Snapshot {
        source: InflowSource::Snapshot {
            rho,
            cell_length: cell_len,
            epoch_h,
            forecast,
        },
        bottleneck_queue,
        platoons: queue_platoons,
        extra_windows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ControlCase;
    use approx::assert_relative_eq;

    fn reference_constants() -> QueueConstants {
        QueueConstants::from_scenario(&Scenario::reference(ControlCase::None))
    }

    #[test]
    fn constants_from_reference_scenario() {
        let c = reference_constants();
        assert_relative_eq!(c.free_speed, 100.0);
        assert_relative_eq!(c.bottleneck_position, 4.92);
        assert_relative_eq!(c.bottleneck_capacity, 4000.0);
        assert_relative_eq!(c.discharge_flow, 36000.0 / 11.0, max_relative = 1e-12);
        assert_relative_eq!(c.cap_high, 4000.0);
        assert_relative_eq!(c.cap_low, 2000.0);
        assert_relative_eq!(c.step_h, 0.0002);
    }

    #[test]
    fn event_times_examples() {
        let (_, t_u) = event_times(3.92, 50.0, 4.92, 100.0).unwrap();
        assert_relative_eq!(t_u, 0.02);
        let (t_v, t_u) = event_times(1.0, 100.0, 4.92, 100.0).unwrap();
        assert_relative_eq!(t_v, t_u);
        let (_, t_u) = event_times(0.0, 72.0, 4.92, 100.0).unwrap();
        assert_relative_eq!(t_u, 4.92 / 72.0, max_relative = 1e-12);
        assert!(t_u - 0.0683 < 1e-4);
        assert_eq!(event_times(1.0, 0.0, 4.92, 100.0), Err(QueueError::ZeroSpeed));
    }

    #[test]
    fn upstream_tail_position_examples() {
        assert_relative_eq!(upstream_tail_position(2.0, 50.0, 100.0, 0.0), 2.0);
        assert_relative_eq!(upstream_tail_position(2.0, 0.0, 100.0, 0.3), 2.0);
        assert_relative_eq!(upstream_tail_position(2.0, 50.0, 100.0, 0.01), 3.0);
        assert_relative_eq!(upstream_tail_position(2.0, 100.0, 100.0, 0.5), 2.0);
    }

    #[test]
    fn platoon_clock_round_trip_and_arrival_fixed_point() {
        let (entry, arrival) = event_times(1.5, 60.0, 4.92, 100.0).unwrap();
        let tau = to_platoon_clock(arrival, entry, 60.0, 100.0);
        assert_relative_eq!(tau, arrival, max_relative = 1e-12);
        for t in [entry, 0.5 * (entry + arrival), arrival] {
            let back = from_platoon_clock(to_platoon_clock(t, entry, 60.0, 100.0), entry, 60.0, 100.0);
            assert_relative_eq!(back, t, max_relative = 1e-12);
        }
    }

    #[test]
    fn pass_through_below_capacity() {
        let sim = QueueSim::new(reference_constants(), InflowSource::Constant(3000.0));
        let out = sim.run(0.05);
        assert!(out.bottleneck_queue.iter().all(|&q| q <= QUEUE_EPS));
        assert!(out.outflow.iter().all(|&q| (q - 3000.0).abs() < 1e-9));
        assert_eq!(out.clearance_time, Some(0.0));
    }

    #[test]
    fn queue_grows_at_excess_inflow() {
        let sim = QueueSim::new(reference_constants(), InflowSource::Constant(3500.0))
            .with_bottleneck_queue(10.0);
        let out = sim.run(0.1);
        let expected = 10.0 + (3500.0 - 36000.0 / 11.0) * 0.1;
        assert_relative_eq!(
            *out.bottleneck_queue.last().unwrap(),
            expected,
            max_relative = 1e-9
        );
        assert!((3500.0_f64 - 36000.0 / 11.0 - 227.27).abs() < 0.01);
        assert_eq!(out.clearance_time, None);
    }

    #[test]
    fn congested_outflow_holds_discharge_until_empty() {
        let sim = QueueSim::new(reference_constants(), InflowSource::Constant(3000.0))
            .with_bottleneck_queue(10.0);
        let out = sim.run(0.06);
        let q_dis = 36000.0 / 11.0;
        for (i, &q) in out.outflow.iter().enumerate() {
            if out.bottleneck_queue[i] > QUEUE_EPS {
                assert_relative_eq!(q, q_dis, max_relative = 1e-12);
            }
        }
        assert!(*out.bottleneck_queue.last().unwrap() <= QUEUE_EPS);
        let drained = 10.0 / (q_dis - 3000.0);
        let cleared = out.clearance_time.expect("queue must clear");
        assert!((cleared - drained).abs() < 3.0 * out.step_h, "{cleared} vs {drained}");
        // After clearing, the bottleneck passes the inflow through unchanged.
        let tail = &out.outflow[out.index_of(drained + 0.005)..];
        assert!(tail.iter().all(|&q| (q - 3000.0).abs() < 1e-9));
    }

    #[test]
    fn mass_balance_is_exact_between_jumps() {
        let sim = QueueSim::new(reference_constants(), InflowSource::Constant(3600.0))
            .with_bottleneck_queue(4.0);
        let out = sim.run(0.08);
        let integral: f64 = out
            .inflow
            .iter()
            .zip(&out.outflow)
            .map(|(i, o)| (i - o) * out.step_h)
            .sum();
        let delta = out.bottleneck_queue.last().unwrap() - 4.0;
        assert_relative_eq!(integral, delta, epsilon = 1e-9);
    }

    #[test]
    fn fixed_cap_station_traps_and_releases_queue() {
        let c = reference_constants();
        let mut p = QueuePlatoon::new(0, 2.0, 50.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        p.policy = CapPolicy::Fixed(2000.0);
        let (t_v, t_u) = (p.entry_time, p.arrival_time);
        let sim = QueueSim::new(c, InflowSource::Constant(3000.0)).with_platoons(vec![p]);
        let out = sim.run(0.15);
        // The trapped queue accumulates at (inflow − cap) over the approach.
        let expected = (3000.0 - 2000.0) * (t_u - t_v);
        let at_arrival = out.platoons[0].queue[out.index_of(t_u) - 2];
        assert!((at_arrival - expected).abs() < 0.5, "{at_arrival} vs {expected}");
        // On arrival the trapped queue transfers to the bottleneck.
        let merge_idx = out.index_of(t_u);
        assert!(out.bottleneck_queue[merge_idx] >= at_arrival * 0.999);
        assert_eq!(out.platoons[0].merge_time, Some(t_u));
        // While the platoon traverses the reduced section its passage flow
        // reaches the bottleneck on top of the marching flow.
        let inside = out.index_of(t_u + 0.0005);
        assert_relative_eq!(out.inflow[inside], 3000.0 + 50.0 * 20.0, max_relative = 1e-9);
    }

    #[test]
    fn refined_integration_stays_close() {
        let coarse_c = reference_constants();
        let mut fine_c = coarse_c;
        fine_c.step_h = coarse_c.step_h / 10.0;
        let mut p = QueuePlatoon::new(0, 2.0, 50.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        p.policy = CapPolicy::Fixed(2000.0);
        let build = |c: QueueConstants| {
            QueueSim::new(c, InflowSource::Constant(2500.0))
                .with_bottleneck_queue(20.0)
                .with_platoons(vec![p.clone()])
        };
        let coarse = build(coarse_c).run(0.15);
        let fine = build(fine_c).run(0.15);
        let mut worst: f64 = 0.0;
        for (i, &q) in coarse.bottleneck_queue.iter().enumerate() {
            let j = ((i + 1) * 10 - 1).min(fine.bottleneck_queue.len() - 1);
            worst = worst.max((q - fine.bottleneck_queue[j]).abs());
        }
        for (i, &q) in coarse.platoons[0].queue.iter().enumerate() {
            let j = ((i + 1) * 10 - 1).min(fine.platoons[0].queue.len() - 1);
            worst = worst.max((q - fine.platoons[0].queue[j]).abs());
        }
        assert!(worst <= 0.5, "refinement deviation {worst}");
    }

    #[test]
    fn release_law_branches() {
        let c = reference_constants();
        // Clear bottleneck, single platoon: full release.
        let p = QueuePlatoon::new(0, 2.0, 60.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0)).with_platoons(vec![p.clone()]);
        assert_relative_eq!(sim.caps_at(0.0)[0], 4000.0);
        // Congested bottleneck: held low; a follower behind a queue-free
        // leader inherits the leader's cap, behind a loaded leader it is held
        // low in its own right.
        let leader = QueuePlatoon::new(1, 4.0, 60.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        let follower = QueuePlatoon::new(2, 1.0, 60.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0))
            .with_bottleneck_queue(5.0)
            .with_platoons(vec![leader.clone(), follower.clone()]);
        let caps = sim.caps_at(0.001);
        assert_relative_eq!(caps[0], 2000.0);
        assert_relative_eq!(caps[1], 2000.0);
        let mut loaded = leader.clone();
        loaded.queue = 8.0;
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0))
            .with_bottleneck_queue(0.0)
            .with_platoons(vec![loaded, follower.clone()]);
        let caps = sim.caps_at(0.001);
        // Leader sees a clear bottleneck: released; its own queue does not
        // block the release branch for itself but does block inheritance.
        assert_relative_eq!(caps[0], 4000.0);
        assert_relative_eq!(caps[1], 2000.0);
        // Protected off-ramp between follower and leader: once the ramp's
        // first arrivals reach the merge, the follower is released so the
        // exiting traffic is not withheld.  The leader must still be en route
        // (position 3.5 arrives at ≈0.0237 > the 0.0192 ramp gate).
        let leader = QueuePlatoon::new(1, 3.5, 60.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        let follower = QueuePlatoon::new(2, 1.0, 60.0, 0.1, 2.0, 0.0, 4.92, 100.0).unwrap();
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0))
            .with_bottleneck_queue(5.0)
            .with_platoons(vec![leader, follower])
            .with_ramps(vec![RampStation {
                position: 3.0,
                kind: RampKind::Off { split_ratio: 0.4 },
            }])
            .with_protected_release(true);
        let caps = sim.caps_at(0.021);
        assert_relative_eq!(caps[0], 2000.0);
        assert_relative_eq!(caps[1], 4000.0);
    }

    /// Largest single-step increase of a series and the step change just
    /// before it, so event jumps can be isolated from the marching drift.
    fn biggest_jump(series: &[f64]) -> (f64, f64) {
        let mut best = (f64::MIN, 0.0);
        for k in 1..series.len() {
            let d = series[k] - series[k - 1];
            if d > best.0 {
                best = (d, if k >= 2 { series[k - 1] - series[k - 2] } else { 0.0 });
            }
        }
        best
    }

    #[test]
    fn merge_adds_platoon_mass_when_meeting_or_carrying_congestion() {
        let c = reference_constants();
        let mut p = QueuePlatoon::new(0, 4.0, 50.0, 0.1, 2.0, 3.0, 4.92, 100.0).unwrap();
        // A fixed cap equal to the marching inflow keeps the trapped queue
        // intact until arrival in both congested sub-cases.
        p.policy = CapPolicy::Fixed(1000.0);
        let t_u = p.arrival_time;
        // Clear bottleneck but a carried queue: the trapped vehicles queue up
        // and the platoon itself sits at the back of them, so both transfer.
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0)).with_platoons(vec![p.clone()]);
        let out = sim.run(t_u + 0.004);
        let (jump, drift) = biggest_jump(&out.bottleneck_queue);
        assert!(
            (jump - drift - 5.0).abs() < 1e-6,
            "expected ≈5, got {}",
            jump - drift
        );
        assert_eq!(out.platoons[0].merge_time, Some(t_u));
        // Standing queue at merge: same transfer on top of the remaining
        // backlog.  60 veh at drain rate q_dis − 1000 still leaves a queue.
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0))
            .with_bottleneck_queue(60.0)
            .with_platoons(vec![p.clone()]);
        let out = sim.run(t_u + 0.004);
        let (jump, drift) = biggest_jump(&out.bottleneck_queue);
        assert!(
            (jump - drift - 5.0).abs() < 1e-6,
            "expected ≈5, got {}",
            jump - drift
        );
        // Fully free merge: no queue anywhere, the platoon passes through
        // without perturbing the bottleneck.
        let mut free = p.clone();
        free.queue = 0.0;
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0)).with_platoons(vec![free]);
        let out = sim.run(t_u + 0.004);
        let peak = out
            .bottleneck_queue
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max);
        assert!(peak.abs() < 1e-9, "free merge should leave no queue: {peak}");
    }

    #[test]
    fn ramp_stations_gate_and_scale_flow() {
        let c = reference_constants();
        let sim = QueueSim::new(c, InflowSource::Constant(1000.0)).with_ramps(vec![
            RampStation {
                position: 2.0,
                kind: RampKind::On { mean_vph: 500.0 },
            },
            RampStation {
                position: 3.0,
                kind: RampKind::Off { split_ratio: 0.4 },
            },
        ]);
        let out = sim.run(0.06);
        let on_gate = (4.92 - 2.0) / 100.0;
        let off_gate = (4.92 - 3.0) / 100.0;
        // Before any gate opens the marching flow is untouched.
        assert_relative_eq!(out.inflow[out.index_of(off_gate) - 2], 1000.0);
        // Off-ramp active, on-ramp still gated.
        assert_relative_eq!(out.inflow[out.index_of(on_gate) - 2], 600.0);
        // Both active.
        let i = out.index_of(on_gate) + 2;
        assert_relative_eq!(out.inflow[i], (1000.0 + 500.0) * 0.6);
        assert_relative_eq!(out.ramp_flows[0][i], 500.0);
        assert_relative_eq!(out.ramp_flows[1][i], -(1000.0 + 500.0) * 0.4);
    }

    #[test]
    fn off_ramp_crossing_reduces_trapped_queue() {
        let c = reference_constants();
        let p = QueuePlatoon::new(0, 2.5, 50.0, 0.1, 2.0, 10.0, 4.92, 100.0).unwrap();
        let t_cross = p.crossing_time(3.0, 100.0);
        let sim = QueueSim::new(c, InflowSource::Constant(0.0))
            .with_platoons(vec![p])
            .with_ramps(vec![RampStation {
                position: 3.0,
                kind: RampKind::Off { split_ratio: 0.4 },
            }]);
        let out = sim.run(t_cross + 0.003);
        let before = out.platoons[0].queue[out.index_of(t_cross) - 2];
        let after = out.platoons[0].queue[out.index_of(t_cross) + 2];
        assert_relative_eq!(after, before * 0.6, max_relative = 1e-6);
    }

    #[test]
    fn ramp_sets_membership() {
        let c = reference_constants();
        let x_b = c.bottleneck_position;
        let v = c.free_speed;
        let p1 = QueuePlatoon::new(1, 3.5, 60.0, 0.1, 2.0, 0.0, x_b, v).unwrap();
        let p2 = QueuePlatoon::new(2, 1.0, 60.0, 0.1, 2.0, 0.0, x_b, v).unwrap();
        let platoons = vec![p1.clone(), p2.clone()];
        let ramp = RampStation {
            position: 4.0,
            kind: RampKind::Off { split_ratio: 0.4 },
        };
        assert_eq!(
            ramp_sets(0.05, &[], &[], x_b, v),
            RampSets {
                bottleneck: vec![],
                per_platoon: vec![]
            }
        );
        // Before the gate opens the ramp is excluded everywhere.
        let gate = (x_b - ramp.position) / v;
        let sets = ramp_sets(gate / 2.0, &platoons, &[ramp], x_b, v);
        assert!(sets.bottleneck.is_empty());
        assert!(sets.per_platoon.iter().all(|s| s.is_empty()));
        // Once open and between the leading platoon and the bottleneck, the
        // ramp feeds the bottleneck queue.
        let t = p1.entry_time + 0.002;
        assert!(t >= gate);
        let sets = ramp_sets(t, &platoons, &[ramp], x_b, v);
        assert!(p1.meeting_position(t, x_b, v) < 4.0);
        assert_eq!(sets.bottleneck, vec![0]);
        // A ramp between the two platoons feeds the leader's trapped queue.
        let mid = RampStation {
            position: 3.0,
            kind: RampKind::On { mean_vph: 100.0 },
        };
        let t2 = 0.03;
        let sets = ramp_sets(t2, &platoons, &[mid], x_b, v);
        assert_eq!(sets.per_platoon[0], vec![0]);
        assert!(sets.per_platoon[1].is_empty());
    }

    #[test]
    fn transform_consistency_between_clocks() {
        // A capped station accumulates the same queue whether integrated on
        // the label clock or in original time with the slowdown factor.
        let v = 100.0;
        let u = 60.0;
        let (entry, arrival) = event_times(1.0, u, 4.92, v).unwrap();
        let q_in = 3000.0;
        let cap = 2000.0;
        // Label-clock integration over (entry, arrival].
        let label_mass = (q_in - cap) * (arrival - entry);
        // Original-time integration of the relative flux over the same
        // physical interval [entry, arrival] mapped through the local clock.
        let tau_span = to_platoon_clock(arrival, entry, u, v) - to_platoon_clock(entry, entry, u, v);
        let physical_span = arrival - entry;
        let original_mass = (q_in - cap) * (v - u) / v * tau_span;
        assert_relative_eq!(tau_span * (v - u) / v, physical_span, max_relative = 1e-12);
        assert_relative_eq!(label_mass, original_mass, epsilon = 1e-9);
    }

    #[test]
    fn snapshot_free_flow_is_empty() {
        let scenario = Scenario::reference(ControlCase::None);
        let n = scenario.n_cells();
        let mut states = vec![CellState::empty(100.0); n];
        for cell in states.iter_mut() {
            cell.rho[VehicleClass::Mainline.index()] = 15.0;
            cell.rho[VehicleClass::OffRamp.index()] = 5.0;
        }
        let snap = snapshot_from_ctm(&scenario, &states, &[], 0.5);
        assert_eq!(snap.bottleneck_queue, 0.0);
        assert!(snap.platoons.is_empty());
        assert!(snap.extra_windows.is_empty());
        let InflowSource::Snapshot { rho: profile, .. } = &snap.source else {
            panic!("snapshot source expected");
        };
        assert!(profile.iter().all(|&r| (r - 20.0).abs() < 1e-12));
    }

    #[test]
    fn snapshot_extracts_excess_mass_at_bottleneck() {
        let scenario = Scenario::reference(ControlCase::None);
        let n = scenario.n_cells();
        let rho_c = 12240.0 / 44.0;
        let rho_d = 1440.0 / 44.0;
        let mut states = vec![CellState::empty(100.0); n];
        for cell in states.iter_mut() {
            cell.rho[VehicleClass::Mainline.index()] = 20.0;
        }
        // 0.2 km (10 cells) of standing queue touching the lane drop.
        let last = scenario.last_full_cell();
        for i in (last - 9)..=last {
            states[i].rho[VehicleClass::Mainline.index()] = rho_c;
        }
        let snap = snapshot_from_ctm(&scenario, &states, &[], 0.0);
        assert_relative_eq!(
            snap.bottleneck_queue,
            0.2 * (rho_c - rho_d),
            max_relative = 1e-9
        );
        // Queue cells march at no more than the discharge density.
        let InflowSource::Snapshot { rho: profile, .. } = &snap.source else {
            panic!("snapshot source expected");
        };
        assert_relative_eq!(profile[last], rho_d, max_relative = 1e-12);
        assert_relative_eq!(profile[0], 20.0);
    }

    #[test]
    fn snapshot_platoon_without_trapped_traffic() {
        let scenario = Scenario::reference(ControlCase::None);
        let n = scenario.n_cells();
        let mut states = vec![CellState::empty(100.0); n];
        for cell in states.iter_mut() {
            cell.rho[VehicleClass::Mainline.index()] = 10.0;
        }
        let mut p = Platoon::new(3, 2.0, 70.0);
        p.head = 2.0;
        p.mass_to_enter = 0.0;
        let snap = snapshot_from_ctm(&scenario, &states, &[p], 0.0);
        assert_eq!(snap.platoons.len(), 1);
        assert_eq!(snap.platoons[0].queue, 0.0);
        assert_eq!(snap.platoons[0].id, 3);
    }

    #[test]
    fn snapshot_platoon_past_bottleneck_becomes_window() {
        let scenario = Scenario::reference(ControlCase::None);
        let states = vec![CellState::empty(100.0); scenario.n_cells()];
        let mut p = Platoon::new(7, 2.0, 80.0);
        p.head = 4.95;
        p.mass_to_enter = 0.0;
        let snap = snapshot_from_ctm(&scenario, &states, &[p], 0.0);
        assert!(snap.platoons.is_empty());
        assert_eq!(snap.extra_windows.len(), 1);
        let w = snap.extra_windows[0];
        assert_eq!(w.start, 0.0);
        assert!(w.end > 0.0);
        assert_relative_eq!(w.flow_vph, 80.0 * 20.0);
    }

    #[test]
    fn snapshot_boundary_forecast_phases() {
        let scenario = Scenario::reference(ControlCase::None);
        let states = vec![CellState::empty(100.0); scenario.n_cells()];
        let snap = snapshot_from_ctm(&scenario, &states, &[], 0.0);
        let InflowSource::Snapshot { forecast, .. } = &snap.source else {
            panic!("snapshot source expected");
        };
        assert_relative_eq!(forecast.mean_vph, 2500.0);
        assert_relative_eq!(forecast.flow_at(0.01), 1250.0);
        assert_relative_eq!(forecast.flow_at(0.5), 2500.0);
        assert_relative_eq!(forecast.flow_at(1.9), 1250.0);
    }
}
