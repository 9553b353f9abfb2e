//! Scenario configuration: road geometry, fundamental diagram, demand and
//! platoon processes, run protocol, and the control case.
//!
//! Configurations are loaded from a flat `section.key = value` text format
//! (see `docs/config_schema.md` at the repository root). [`ScenarioConfig`]
//! is the raw, serializable form; [`Scenario`] is the validated form with
//! derived quantities (cell counts, lane-drop location, capacity constants)
//! that the simulator and predictor consume.
//!
//! [`ScenarioConfig::reference`] builds the built-in five-kilometre
//! lane-drop scenario used throughout the tests and documentation: a
//! three-lane road narrowing to two lanes near the downstream end, with one
//! on-ramp, one off-ramp, uniformly redrawn demand, and Poisson platoon
//! arrivals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Triangular fundamental diagram shared by every lane of the road, plus the
/// capacity-drop ratio applied when a lane-drop cell is congested.
///
/// Densities are per lane (veh/km/lane); speeds are km/h.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalDiagram {
    /// Free-flow speed `V`.
    pub free_flow_speed: f64,
    /// Critical (capacity) density per lane.
    pub critical_density_per_lane: f64,
    /// Jam density per lane.
    pub jam_density_per_lane: f64,
    /// Fraction of upstream density that keeps pressing into a congested
    /// lane-drop cell, reducing its discharge below capacity.
    pub capacity_drop_ratio: f64,
}

impl FundamentalDiagram {
    /// Congestion-wave speed of the triangular diagram (km/h); identical for
    /// every lane count because both densities scale with lanes.
    pub fn wave_speed(&self) -> f64 {
        self.free_flow_speed * self.critical_density_per_lane
            / (self.jam_density_per_lane - self.critical_density_per_lane)
    }
}

/// An on-ramp merging into the mainline.
#[derive(Debug, Clone, PartialEq)]
pub struct OnRamp {
    /// Merge location (km from the road start).
    pub position_km: f64,
}

/// An off-ramp leaving the mainline.
#[derive(Debug, Clone, PartialEq)]
pub struct OffRamp {
    /// Diverge location (km from the road start).
    pub position_km: f64,
    /// Maximum exit flow the ramp can absorb (veh/h).
    pub capacity_vph: f64,
    /// Fraction of ramp-bound arrivals relative to the flow feeding the
    /// diverge; used by the queue predictor when forecasting exits.
    pub split_ratio: f64,
}

/// Road layout: length, discretization, lane counts, and ramp locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGeometry {
    pub length_km: f64,
    pub cell_length_km: f64,
    pub mainline_lanes: u32,
    /// Lane count downstream of the lane drop.
    pub bottleneck_lanes: u32,
    /// Start of the reduced-lane section (km from the road start).
    pub bottleneck_position_km: f64,
    pub onramps: Vec<OnRamp>,
    pub offramps: Vec<OffRamp>,
}

/// Simulation clock: step size and run phases.
///
/// The first `warmup_steps` and the final `cooldown_steps` scale boundary
/// demand by the demand process's warm factor so runs start and end near
/// free flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub step_h: f64,
    pub total_steps: u32,
    pub warmup_steps: u32,
    pub cooldown_steps: u32,
}

impl TimeGrid {
    /// Total simulated horizon in hours.
    pub fn horizon_h(&self) -> f64 {
        self.step_h * self.total_steps as f64
    }
}

/// Uniformly distributed demand for one class at one origin: flows are drawn
/// from `mean ± half_width` (veh/h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDemand {
    pub mean_vph: f64,
    pub half_width_vph: f64,
}

impl ClassDemand {
    pub fn zero() -> Self {
        ClassDemand { mean_vph: 0.0, half_width_vph: 0.0 }
    }
}

/// Demand at one on-ramp, split by destination class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnRampDemand {
    pub mainline: ClassDemand,
    pub offramp: ClassDemand,
}

/// Stochastic background-demand process.
///
/// Every `hold_interval_h` the engine redraws all origin flows independently
/// and holds them constant until the next redraw. During warmup and cooldown
/// the drawn flows are multiplied by `warm_factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProcess {
    pub hold_interval_h: f64,
    pub warm_factor: f64,
    /// Road-start demand of through traffic.
    pub main_mainline: ClassDemand,
    /// Road-start demand of off-ramp-bound traffic.
    pub main_offramp: ClassDemand,
    /// Per-on-ramp demand, aligned with `RoadGeometry::onramps`.
    pub onramp: Vec<OnRampDemand>,
}

/// Poisson platoon-arrival process and the platoon actuation limits.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonProcess {
    /// Mean arrivals per hour at the road start.
    pub arrival_rate_per_h: f64,
    /// Mass of one platoon in passenger-car equivalents.
    pub size_pce: f64,
    /// Lowest speed a platoon can be commanded to (km/h).
    pub speed_min_kmh: f64,
    /// Highest speed a platoon can be commanded to (km/h).
    pub speed_max_kmh: f64,
}

/// Which controller runs the platoons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlCase {
    /// Platoons hold their drawn entry speed in one lane; no control.
    None,
    /// Queue-predictive speed/lane control, ignoring ramps when predicting.
    NoRamp,
    /// Queue-predictive speed/lane control with ramp-aware prediction.
    WRamp,
    /// Idealized benchmark: platoons at maximum speed plus a full-compliance
    /// speed controller on the background traffic.
    Ideal,
}

impl ControlCase {
    pub const ALL: [ControlCase; 4] =
        [ControlCase::None, ControlCase::NoRamp, ControlCase::WRamp, ControlCase::Ideal];

    pub fn label(self) -> &'static str {
        match self {
            ControlCase::None => "none",
            ControlCase::NoRamp => "noramp",
            ControlCase::WRamp => "wramp",
            ControlCase::Ideal => "ideal",
        }
    }
}

impl fmt::Display for ControlCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ControlCase {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ControlCase::None),
            "noramp" => Ok(ControlCase::NoRamp),
            "wramp" => Ok(ControlCase::WRamp),
            "ideal" => Ok(ControlCase::Ideal),
            other => Err(ConfigError::BadValue {
                key: "control.case".into(),
                value: other.into(),
                expected: "one of none|noramp|wramp|ideal".into(),
            }),
        }
    }
}

/// Raw scenario description as read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub fd: FundamentalDiagram,
    pub road: RoadGeometry,
    pub time: TimeGrid,
    pub demand: DemandProcess,
    pub platoon: PlatoonProcess,
    pub control_case: ControlCase,
}

/// Errors raised while reading the flat config format.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot parse `{value}` ({expected})")]
    BadValue { key: String, value: String, expected: String },
    #[error("ramp indices must be contiguous from 0; `{0}` breaks the sequence")]
    RampIndex(String),
}

/// One failed validation rule.
#[derive(Debug, Clone)]
pub struct Violation {
    /// Dotted config key (or derived-quantity name) the rule concerns.
    pub field: String,
    pub message: String,
}

/// Outcome of [`ScenarioConfig::validate`]: empty means the config is usable.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &str, message: String) {
        self.violations.push(Violation { field: field.into(), message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("config valid");
        }
        writeln!(f, "{} validation error(s):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

impl ScenarioConfig {
    /// The built-in reference scenario: a 5 km three-lane road dropping to
    /// two lanes at 4.92 km, one on-ramp at 2 km, one off-ramp at 3 km, a
    /// two-hour horizon at 0.72 s steps, uniformly redrawn demand, and
    /// Poisson platoon arrivals at 81/h.
    pub fn reference() -> Self {
        ScenarioConfig {
            fd: FundamentalDiagram {
                free_flow_speed: 100.0,
                critical_density_per_lane: 20.0,
                jam_density_per_lane: 180.0,
                capacity_drop_ratio: 0.4,
            },
            road: RoadGeometry {
                length_km: 5.0,
                cell_length_km: 0.02,
                mainline_lanes: 3,
                bottleneck_lanes: 2,
                bottleneck_position_km: 4.92,
                onramps: vec![OnRamp { position_km: 2.0 }],
                offramps: vec![OffRamp {
                    position_km: 3.0,
                    capacity_vph: 2000.0,
                    split_ratio: 0.4,
                }],
            },
            time: TimeGrid {
                step_h: 0.0002,
                total_steps: 10_000,
                warmup_steps: 250,
                cooldown_steps: 1000,
            },
            demand: DemandProcess {
                hold_interval_h: 0.004,
                warm_factor: 0.5,
                main_mainline: ClassDemand { mean_vph: 1500.0, half_width_vph: 500.0 },
                main_offramp: ClassDemand { mean_vph: 1000.0, half_width_vph: 250.0 },
                onramp: vec![OnRampDemand {
                    mainline: ClassDemand { mean_vph: 1200.0, half_width_vph: 300.0 },
                    offramp: ClassDemand::zero(),
                }],
            },
            platoon: PlatoonProcess {
                arrival_rate_per_h: 81.0,
                size_pce: 2.0,
                speed_min_kmh: 50.0,
                speed_max_kmh: 90.0,
            },
            control_case: ControlCase::None,
        }
    }

    /// Parse the flat `section.key = value` format.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: raw.trim().into() });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed { line, text: raw.trim().into() });
            }
            if map.insert(key.clone(), (line, value)).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Self::from_map(map)
    }

    fn from_map(mut map: BTreeMap<String, (usize, String)>) -> Result<Self, ConfigError> {
        fn take_f64(
            map: &mut BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<f64, ConfigError> {
            let (_, value) =
                map.remove(key).ok_or_else(|| ConfigError::MissingKey(key.into()))?;
            value.parse::<f64>().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value,
                expected: "a number".into(),
            })
        }
        fn take_u32(
            map: &mut BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<u32, ConfigError> {
            let (_, value) =
                map.remove(key).ok_or_else(|| ConfigError::MissingKey(key.into()))?;
            value.parse::<u32>().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value,
                expected: "a non-negative integer".into(),
            })
        }
        fn take_opt_f64(
            map: &mut BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<Option<f64>, ConfigError> {
            match map.remove(key) {
                None => Ok(None),
                Some((_, value)) => value
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        value,
                        expected: "a number".into(),
                    }),
            }
        }

        let fd = FundamentalDiagram {
            free_flow_speed: take_f64(&mut map, "fd.free_flow_speed_kmh")?,
            critical_density_per_lane: take_f64(&mut map, "fd.critical_density_per_lane_vpk")?,
            jam_density_per_lane: take_f64(&mut map, "fd.jam_density_per_lane_vpk")?,
            capacity_drop_ratio: take_f64(&mut map, "fd.capacity_drop_ratio")?,
        };

        let mut onramps = Vec::new();
        let mut onramp_demand = Vec::new();
        for k in 0.. {
            let pos_key = format!("onramp.{k}.position_km");
            let Some(pos) = take_opt_f64(&mut map, &pos_key)? else {
                break;
            };
            onramps.push(OnRamp { position_km: pos });
            onramp_demand.push(OnRampDemand {
                mainline: ClassDemand {
                    mean_vph: take_f64(&mut map, &format!("demand.onramp.{k}.mainline.mean_vph"))?,
                    half_width_vph: take_f64(
                        &mut map,
                        &format!("demand.onramp.{k}.mainline.half_width_vph"),
                    )?,
                },
                offramp: ClassDemand {
                    mean_vph: take_f64(&mut map, &format!("demand.onramp.{k}.offramp.mean_vph"))?,
                    half_width_vph: take_f64(
                        &mut map,
                        &format!("demand.onramp.{k}.offramp.half_width_vph"),
                    )?,
                },
            });
        }

        let mut offramps = Vec::new();
        for k in 0.. {
            let pos_key = format!("offramp.{k}.position_km");
            let Some(pos) = take_opt_f64(&mut map, &pos_key)? else {
                break;
            };
            offramps.push(OffRamp {
                position_km: pos,
                capacity_vph: take_f64(&mut map, &format!("offramp.{k}.capacity_vph"))?,
                split_ratio: take_f64(&mut map, &format!("offramp.{k}.split_ratio"))?,
            });
        }

        let road = RoadGeometry {
            length_km: take_f64(&mut map, "road.length_km")?,
            cell_length_km: take_f64(&mut map, "road.cell_length_km")?,
            mainline_lanes: take_u32(&mut map, "road.mainline_lanes")?,
            bottleneck_lanes: take_u32(&mut map, "road.bottleneck_lanes")?,
            bottleneck_position_km: take_f64(&mut map, "road.bottleneck_position_km")?,
            onramps,
            offramps,
        };

        let time = TimeGrid {
            step_h: take_f64(&mut map, "time.step_h")?,
            total_steps: take_u32(&mut map, "time.total_steps")?,
            warmup_steps: take_u32(&mut map, "time.warmup_steps")?,
            cooldown_steps: take_u32(&mut map, "time.cooldown_steps")?,
        };

        let demand = DemandProcess {
            hold_interval_h: take_f64(&mut map, "demand.hold_interval_h")?,
            warm_factor: take_f64(&mut map, "demand.warm_factor")?,
            main_mainline: ClassDemand {
                mean_vph: take_f64(&mut map, "demand.main.mainline.mean_vph")?,
                half_width_vph: take_f64(&mut map, "demand.main.mainline.half_width_vph")?,
            },
            main_offramp: ClassDemand {
                mean_vph: take_f64(&mut map, "demand.main.offramp.mean_vph")?,
                half_width_vph: take_f64(&mut map, "demand.main.offramp.half_width_vph")?,
            },
            onramp: onramp_demand,
        };

        let platoon = PlatoonProcess {
            arrival_rate_per_h: take_f64(&mut map, "platoon.arrival_rate_per_h")?,
            size_pce: take_f64(&mut map, "platoon.size_pce")?,
            speed_min_kmh: take_f64(&mut map, "platoon.speed_min_kmh")?,
            speed_max_kmh: take_f64(&mut map, "platoon.speed_max_kmh")?,
        };

        let control_case = {
            let key = "control.case";
            let (_, value) =
                map.remove(key).ok_or_else(|| ConfigError::MissingKey(key.into()))?;
            value.parse::<ControlCase>()?
        };

        if let Some((key, (line, _))) = map.into_iter().next() {
            if key.starts_with("onramp.") || key.starts_with("offramp.") || key.starts_with("demand.onramp.") {
                return Err(ConfigError::RampIndex(key));
            }
            return Err(ConfigError::UnknownKey { line, key });
        }
        Ok(ScenarioConfig { fd, road, time, demand, platoon, control_case })
    }

    /// Serialize in canonical key order. Parsing the output reproduces the
    /// config exactly, and serializing again reproduces the bytes.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: f64| {
            s.push_str(&format!("{k} = {v}\n"));
        };
        let kvu = |s: &mut String, k: &str, v: u32| {
            s.push_str(&format!("{k} = {v}\n"));
        };

        kv(&mut s, "fd.free_flow_speed_kmh", self.fd.free_flow_speed);
        kv(&mut s, "fd.critical_density_per_lane_vpk", self.fd.critical_density_per_lane);
        kv(&mut s, "fd.jam_density_per_lane_vpk", self.fd.jam_density_per_lane);
        kv(&mut s, "fd.capacity_drop_ratio", self.fd.capacity_drop_ratio);

        kv(&mut s, "road.length_km", self.road.length_km);
        kv(&mut s, "road.cell_length_km", self.road.cell_length_km);
        kvu(&mut s, "road.mainline_lanes", self.road.mainline_lanes);
        kvu(&mut s, "road.bottleneck_lanes", self.road.bottleneck_lanes);
        kv(&mut s, "road.bottleneck_position_km", self.road.bottleneck_position_km);
        for (k, r) in self.road.onramps.iter().enumerate() {
            kv(&mut s, &format!("onramp.{k}.position_km"), r.position_km);
        }
        for (k, r) in self.road.offramps.iter().enumerate() {
            kv(&mut s, &format!("offramp.{k}.position_km"), r.position_km);
            kv(&mut s, &format!("offramp.{k}.capacity_vph"), r.capacity_vph);
            kv(&mut s, &format!("offramp.{k}.split_ratio"), r.split_ratio);
        }

        kv(&mut s, "time.step_h", self.time.step_h);
        kvu(&mut s, "time.total_steps", self.time.total_steps);
        kvu(&mut s, "time.warmup_steps", self.time.warmup_steps);
        kvu(&mut s, "time.cooldown_steps", self.time.cooldown_steps);

        kv(&mut s, "demand.hold_interval_h", self.demand.hold_interval_h);
        kv(&mut s, "demand.warm_factor", self.demand.warm_factor);
        kv(&mut s, "demand.main.mainline.mean_vph", self.demand.main_mainline.mean_vph);
        kv(&mut s, "demand.main.mainline.half_width_vph", self.demand.main_mainline.half_width_vph);
        kv(&mut s, "demand.main.offramp.mean_vph", self.demand.main_offramp.mean_vph);
        kv(&mut s, "demand.main.offramp.half_width_vph", self.demand.main_offramp.half_width_vph);
        for (k, d) in self.demand.onramp.iter().enumerate() {
            kv(&mut s, &format!("demand.onramp.{k}.mainline.mean_vph"), d.mainline.mean_vph);
            kv(
                &mut s,
                &format!("demand.onramp.{k}.mainline.half_width_vph"),
                d.mainline.half_width_vph,
            );
            kv(&mut s, &format!("demand.onramp.{k}.offramp.mean_vph"), d.offramp.mean_vph);
            kv(
                &mut s,
                &format!("demand.onramp.{k}.offramp.half_width_vph"),
                d.offramp.half_width_vph,
            );
        }

        kv(&mut s, "platoon.arrival_rate_per_h", self.platoon.arrival_rate_per_h);
        kv(&mut s, "platoon.size_pce", self.platoon.size_pce);
        kv(&mut s, "platoon.speed_min_kmh", self.platoon.speed_min_kmh);
        kv(&mut s, "platoon.speed_max_kmh", self.platoon.speed_max_kmh);

        s.push_str(&format!("control.case = {}\n", self.control_case));
        s
    }

    /// Check every config rule and collect all violations.
    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let fd = &self.fd;
        let road = &self.road;
        let time = &self.time;
        let dem = &self.demand;
        let pl = &self.platoon;

        if fd.free_flow_speed <= 0.0 {
            rep.push("fd.free_flow_speed_kmh", "must be positive".into());
        }
        if fd.critical_density_per_lane <= 0.0 {
            rep.push("fd.critical_density_per_lane_vpk", "must be positive".into());
        }
        if fd.jam_density_per_lane <= fd.critical_density_per_lane {
            rep.push(
                "fd.jam_density_per_lane_vpk",
                "must exceed the per-lane critical density".into(),
            );
        }
        if !(0.0..=1.0).contains(&fd.capacity_drop_ratio) {
            rep.push("fd.capacity_drop_ratio", "must lie in [0, 1]".into());
        }

        if road.length_km <= 0.0 {
            rep.push("road.length_km", "must be positive".into());
        }
        if road.cell_length_km <= 0.0 {
            rep.push("road.cell_length_km", "must be positive".into());
        } else {
            let cells = road.length_km / road.cell_length_km;
            if (cells - cells.round()).abs() > 1e-6 {
                rep.push(
                    "road.cell_length_km",
                    format!("must divide the road length evenly (got {cells} cells)"),
                );
            }
        }
        if road.mainline_lanes == 0 {
            rep.push("road.mainline_lanes", "must be at least 1".into());
        }
        if road.bottleneck_lanes == 0 || road.bottleneck_lanes > road.mainline_lanes {
            rep.push(
                "road.bottleneck_lanes",
                "must be between 1 and the mainline lane count".into(),
            );
        }
        if road.bottleneck_position_km <= 0.0 || road.bottleneck_position_km >= road.length_km {
            rep.push(
                "road.bottleneck_position_km",
                "must lie strictly inside the road".into(),
            );
        }
        for (k, r) in road.onramps.iter().enumerate() {
            if r.position_km <= 0.0 || r.position_km >= road.bottleneck_position_km {
                rep.push(
                    &format!("onramp.{k}.position_km"),
                    "must lie strictly between the road start and the lane drop".into(),
                );
            }
        }
        for (k, r) in road.offramps.iter().enumerate() {
            if r.position_km <= 0.0 || r.position_km >= road.bottleneck_position_km {
                rep.push(
                    &format!("offramp.{k}.position_km"),
                    "must lie strictly between the road start and the lane drop".into(),
                );
            }
            if r.capacity_vph < 0.0 {
                rep.push(&format!("offramp.{k}.capacity_vph"), "must be non-negative".into());
            }
            if !(0.0..1.0).contains(&r.split_ratio) {
                rep.push(&format!("offramp.{k}.split_ratio"), "must lie in [0, 1)".into());
            }
        }

        if time.step_h <= 0.0 {
            rep.push("time.step_h", "must be positive".into());
        } else if road.cell_length_km > 0.0
            && fd.free_flow_speed * time.step_h > road.cell_length_km * (1.0 + 1e-9)
        {
            rep.push(
                "time.step_h",
                "free-flow travel per step must not exceed the cell length".into(),
            );
        }
        if time.total_steps == 0 {
            rep.push("time.total_steps", "must be positive".into());
        }
        if time.warmup_steps + time.cooldown_steps > time.total_steps {
            rep.push(
                "time.warmup_steps",
                "warmup plus cooldown must fit inside the horizon".into(),
            );
        }

        if time.step_h > 0.0 {
            let ratio = dem.hold_interval_h / time.step_h;
            if dem.hold_interval_h <= 0.0 || (ratio - ratio.round()).abs() > 1e-6 {
                rep.push(
                    "demand.hold_interval_h",
                    "must be a positive whole number of time steps".into(),
                );
            }
        }
        if !(0.0..=1.0).contains(&dem.warm_factor) {
            rep.push("demand.warm_factor", "must lie in [0, 1]".into());
        }
        let check_demand = |field: &str, d: &ClassDemand, rep: &mut ValidationReport| {
            if d.half_width_vph < 0.0 {
                rep.push(&format!("{field}.half_width_vph"), "must be non-negative".into());
            }
            if d.mean_vph < d.half_width_vph {
                rep.push(
                    &format!("{field}.mean_vph"),
                    "must be at least the half width (flows stay non-negative)".into(),
                );
            }
        };
        check_demand("demand.main.mainline", &dem.main_mainline, &mut rep);
        check_demand("demand.main.offramp", &dem.main_offramp, &mut rep);
        if dem.onramp.len() != road.onramps.len() {
            rep.push(
                "demand.onramp",
                format!(
                    "must describe every on-ramp ({} ramps, {} demand entries)",
                    road.onramps.len(),
                    dem.onramp.len()
                ),
            );
        }
        for (k, d) in dem.onramp.iter().enumerate() {
            check_demand(&format!("demand.onramp.{k}.mainline"), &d.mainline, &mut rep);
            check_demand(&format!("demand.onramp.{k}.offramp"), &d.offramp, &mut rep);
        }

        if pl.arrival_rate_per_h < 0.0 {
            rep.push("platoon.arrival_rate_per_h", "must be non-negative".into());
        }
        if pl.size_pce <= 0.0 {
            rep.push("platoon.size_pce", "must be positive".into());
        }
        if pl.speed_min_kmh <= 0.0 || pl.speed_min_kmh > pl.speed_max_kmh {
            rep.push("platoon.speed_min_kmh", "must be positive and at most the maximum".into());
        }
        if pl.speed_max_kmh > fd.free_flow_speed {
            rep.push(
                "platoon.speed_max_kmh",
                "must not exceed the free-flow speed".into(),
            );
        }

        rep
    }
}

/// A validated scenario with derived quantities precomputed.
#[derive(Debug, Clone)]
pub struct Scenario {
    cfg: ScenarioConfig,
    n_cells: usize,
    /// First cell (0-based) of the reduced-lane section.
    first_reduced_cell: usize,
    onramp_cells: Vec<usize>,
    offramp_cells: Vec<usize>,
    hold_steps: u32,
}

impl Scenario {
    /// Validate `cfg` and derive grid quantities. Returns the full report on
    /// any violation.
    pub fn from_config(cfg: ScenarioConfig) -> Result<Self, ValidationReport> {
        let report = cfg.validate();
        if !report.is_ok() {
            return Err(report);
        }
        let n_cells = (cfg.road.length_km / cfg.road.cell_length_km).round() as usize;
        let first_reduced_cell =
            cell_of_position(cfg.road.bottleneck_position_km, cfg.road.cell_length_km) + 1;
        let onramp_cells = cfg
            .road
            .onramps
            .iter()
            .map(|r| cell_of_position(r.position_km, cfg.road.cell_length_km))
            .collect();
        let offramp_cells = cfg
            .road
            .offramps
            .iter()
            .map(|r| cell_of_position(r.position_km, cfg.road.cell_length_km))
            .collect();
        let hold_steps = (cfg.demand.hold_interval_h / cfg.time.step_h).round() as u32;
        Ok(Scenario { cfg, n_cells, first_reduced_cell, onramp_cells, offramp_cells, hold_steps })
    }

    /// Shorthand for the built-in reference scenario with a chosen case.
    pub fn reference(case: ControlCase) -> Self {
        let mut cfg = ScenarioConfig::reference();
        cfg.control_case = case;
        Scenario::from_config(cfg).expect("reference config is valid")
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// First cell (0-based) with the reduced lane count.
    pub fn first_reduced_cell(&self) -> usize {
        self.first_reduced_cell
    }

    /// Last cell (0-based) with the full lane count.
    pub fn last_full_cell(&self) -> usize {
        self.first_reduced_cell - 1
    }

    /// Cells (0-based) holding each on-ramp merge, aligned with the config.
    pub fn onramp_cells(&self) -> &[usize] {
        &self.onramp_cells
    }

    /// Cells (0-based) holding each off-ramp diverge, aligned with the config.
    pub fn offramp_cells(&self) -> &[usize] {
        &self.offramp_cells
    }

    /// Lane count of a cell.
    pub fn lanes(&self, cell: usize) -> u32 {
        if cell >= self.first_reduced_cell {
            self.cfg.road.bottleneck_lanes
        } else {
            self.cfg.road.mainline_lanes
        }
    }

    /// Per-lane critical density.
    pub fn sigma_lane(&self) -> f64 {
        self.cfg.fd.critical_density_per_lane
    }

    /// Critical density of the full-lane section (veh/km).
    pub fn sigma_full(&self) -> f64 {
        self.sigma_lane() * self.cfg.road.mainline_lanes as f64
    }

    /// Critical density of the reduced-lane section (veh/km).
    pub fn sigma_reduced(&self) -> f64 {
        self.sigma_lane() * self.cfg.road.bottleneck_lanes as f64
    }

    /// Jam density of the full-lane section (veh/km).
    pub fn jam_full(&self) -> f64 {
        self.cfg.fd.jam_density_per_lane * self.cfg.road.mainline_lanes as f64
    }

    /// Base capacity of the reduced-lane section (veh/h).
    pub fn bottleneck_capacity(&self) -> f64 {
        self.cfg.fd.free_flow_speed * self.sigma_reduced()
    }

    /// Capacity left next to a single-lane platoon on the full section.
    pub fn overtake_capacity_one_lane(&self) -> f64 {
        self.cfg.fd.free_flow_speed * (self.sigma_full() - self.sigma_lane())
    }

    /// Capacity left next to a two-lane platoon on the full section.
    pub fn overtake_capacity_two_lane(&self) -> f64 {
        self.cfg.fd.free_flow_speed * (self.sigma_full() - 2.0 * self.sigma_lane())
    }

    /// Demand scale for a step: the warm factor during warmup and cooldown,
    /// one otherwise.
    pub fn demand_factor(&self, step: u32) -> f64 {
        let t = &self.cfg.time;
        if step < t.warmup_steps || step >= t.total_steps.saturating_sub(t.cooldown_steps) {
            self.cfg.demand.warm_factor
        } else {
            1.0
        }
    }

    /// Number of steps each demand draw is held.
    pub fn hold_steps(&self) -> u32 {
        self.hold_steps
    }

    /// Cell (0-based) containing the position `x` km; cell `i` spans
    /// `(i*L, (i+1)*L]`.
    pub fn cell_of_position(&self, x: f64) -> usize {
        cell_of_position(x, self.cfg.road.cell_length_km).min(self.n_cells - 1)
    }

    /// Upstream face of a cell (km from the road start).
    pub fn cell_start(&self, cell: usize) -> f64 {
        cell as f64 * self.cfg.road.cell_length_km
    }
}

fn cell_of_position(x: f64, cell_length: f64) -> usize {
    let t = x / cell_length - 1e-9;
    (t.ceil().max(1.0) as usize) - 1
}
