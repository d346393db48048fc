//! Seeded kinematic lane-world.
//!
//! A straight multi-lane road along +x. Traffic vehicles follow their lane
//! with the Intelligent Driver Model and a per-driver actuation delay. The
//! ego vehicle is a kinematic bicycle driven by IDM (longitudinal) and pure
//! pursuit (lateral) plus uniform action noise, unless a scripted schedule
//! takes over.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{rects_overlap, OrientedRect, Segment, Vec2};
use crate::seed;
use crate::trajectory::{
    Action, AnomalyLabelSet, KinematicState, Observation, TimeStep, Trajectory, WctEvent, WctKind,
};

pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.8;
pub const WHEELBASE: f64 = 2.8;
/// Steering angle at `steer = 1`, radians.
pub const MAX_STEER_ANGLE: f64 = 0.5;
/// Longitudinal acceleration at `accel = 1`, m/s².
pub const MAX_ACCEL: f64 = 4.0;
/// Zigzag steering period in steps; chosen so the curvature stencil does not alias it.
pub const ZIGZAG_PERIOD: f64 = 32.0;
/// Zigzag steering amplitude at magnitude 1, before escalation.
pub const ZIGZAG_STEER: f64 = 0.1;
/// Zigzag steering amplitude at magnitude 1 once fully escalated.
pub const ZIGZAG_PEAK_STEER: f64 = 0.6;
/// Steps a zigzag or weave holds its initial size before escalating.
pub const ESCALATION_DELAY: usize = 50;
/// Lane-weaving lateral excursion around the lane line at magnitude 1 before
/// escalation, m. Fully escalated, the weave sweeps across both adjacent lanes.
pub const WEAVE_AMPLITUDE: f64 = 0.2;
/// Free longitudinal space needed in the neighbouring lane before weaving, m.
const WEAVE_CLEARANCE: f64 = 6.0;
/// Lateral distance to a lane line below which the crossing flag is raised.
pub const LINE_PROXIMITY: f64 = 0.2;
/// Lateral separation under which another vehicle counts as in-path.
const IN_PATH_LATERAL: f64 = 2.1;
/// Largest deceleration traffic drivers command, m/s².
const TRAFFIC_MAX_DECEL: f64 = 6.0;
/// Rear bumper gap under which a traffic driver feels tailgated, m.
const TAILGATED_GAP: f64 = 3.0;
/// Steps of sustained tailgating before a driver may brake-check.
const BRAKE_CHECK_PATIENCE: usize = 20;
const BRAKE_CHECK_PROB: f64 = 0.02;
const BRAKE_CHECK_STEPS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("expert seeds {expert:?} overlap test seeds {test:?}")]
    OverlappingSeeds { expert: Range<u64>, test: Range<u64> },
    #[error("empty seed range")]
    EmptySeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 15.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 2.0,
            comfortable_decel: 3.0,
        }
    }
}

impl IdmParams {
    /// IDM acceleration for speed `v` given an optional `(gap, lead_speed)`.
    pub fn accel(&self, v: f64, lead: Option<(f64, f64)>) -> f64 {
        let free = if self.desired_speed <= 0.0 {
            -self.comfortable_decel
        } else {
            self.max_accel * (1.0 - (v / self.desired_speed).powi(4))
        };
        match lead {
            None => free,
            Some((gap, lead_v)) => {
                let dv = v - lead_v;
                let dynamic = v * self.time_headway
                    + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt());
                let s_star = self.min_gap + dynamic.max(0.0);
                free - self.max_accel * (s_star / gap.max(0.1)).powi(2)
            }
        }
    }
}

/// Scripted ego behaviours. The first five mirror the labeled anomaly groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Zigzag,
    SuddenBraking,
    SuddenTurn,
    LaneWeaving,
    Tailgating,
    /// Fixed throttle with lane keeping; the ego never brakes.
    ConstantThrottle,
}

impl ScheduleKind {
    pub const ANOMALIES: [ScheduleKind; 5] = [
        ScheduleKind::Zigzag,
        ScheduleKind::SuddenBraking,
        ScheduleKind::SuddenTurn,
        ScheduleKind::LaneWeaving,
        ScheduleKind::Tailgating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Zigzag => "zigzag",
            ScheduleKind::SuddenBraking => "sudden_braking",
            ScheduleKind::SuddenTurn => "sudden_turn",
            ScheduleKind::LaneWeaving => "lane_weaving",
            ScheduleKind::Tailgating => "tailgating",
            ScheduleKind::ConstantThrottle => "constant_throttle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zigzag" => Some(ScheduleKind::Zigzag),
            "sudden_braking" => Some(ScheduleKind::SuddenBraking),
            "sudden_turn" => Some(ScheduleKind::SuddenTurn),
            "lane_weaving" => Some(ScheduleKind::LaneWeaving),
            "tailgating" => Some(ScheduleKind::Tailgating),
            "constant_throttle" => Some(ScheduleKind::ConstantThrottle),
            _ => None,
        }
    }

    /// Default window length in steps for magnitude-1 schedules.
    pub fn default_duration(self) -> usize {
        match self {
            ScheduleKind::Zigzag => 120,
            ScheduleKind::SuddenBraking => 10,
            ScheduleKind::SuddenTurn => 8,
            ScheduleKind::LaneWeaving => 120,
            ScheduleKind::Tailgating => 150,
            ScheduleKind::ConstantThrottle => usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySchedule {
    pub kind: ScheduleKind,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
}

impl AnomalySchedule {
    pub fn new(kind: ScheduleKind, start: usize) -> Self {
        Self {
            kind,
            start,
            duration: kind.default_duration(),
            magnitude: 1.0,
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t - self.start < self.duration
    }

    /// Growth of a zigzag or weave at step `t`: 0 for the first
    /// `ESCALATION_DELAY` steps, then linear up to 1 at the window's end.
    pub fn escalation(&self, t: usize) -> f64 {
        let tau = t.saturating_sub(self.start);
        let ramp = self.duration.saturating_sub(ESCALATION_DELAY).max(1);
        (tau.saturating_sub(ESCALATION_DELAY) as f64 / ramp as f64).min(1.0)
    }
}

/// Explicit traffic placement; `desired_speed <= 0` parks the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpawn {
    pub lane: usize,
    pub x: f64,
    pub speed: f64,
    pub desired_speed: f64,
    /// Driver reaction delay in steps; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction_steps: Option<usize>,
    /// IDM time headway in seconds; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_headway: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub lane_count: usize,
    pub lane_width: f64,
    pub road_length: f64,
    pub traffic_count: usize,
    pub dt: f64,
    pub max_steps: usize,
    pub lidar_beam_count: usize,
    pub lidar_range: f64,
    pub lane_detector_count: usize,
    pub side_detector_count: usize,
    pub expert_action_noise: f64,
    pub anomaly_schedule: Option<AnomalySchedule>,
    /// Ego start lane; drawn from the seed when absent.
    pub ego_lane: Option<usize>,
    pub ego_initial_speed: f64,
    /// Replaces random traffic placement when present.
    pub traffic: Option<Vec<TrafficSpawn>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            lane_width: 3.5,
            road_length: 500.0,
            traffic_count: 6,
            dt: 0.1,
            max_steps: 400,
            lidar_beam_count: 24,
            lidar_range: 50.0,
            lane_detector_count: 12,
            side_detector_count: 12,
            expert_action_noise: 0.0,
            anomaly_schedule: None,
            ego_lane: None,
            ego_initial_speed: 12.0,
            traffic: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.lane_count == 0
            || self.max_steps == 0
            || self.lidar_beam_count == 0
            || self.lane_detector_count == 0
            || self.side_detector_count == 0
        {
            return bad("all counts must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(self.expert_action_noise >= 0.0) {
            return bad("expert_action_noise must be >= 0");
        }
        if !(self.lane_width > 0.0) || !(self.lidar_range > 0.0) || !(self.road_length > 0.0) {
            return bad("lane_width, lidar_range and road_length must be > 0");
        }
        if !(self.ego_initial_speed >= 0.0) {
            return bad("ego_initial_speed must be >= 0");
        }
        if let Some(l) = self.ego_lane {
            if l >= self.lane_count {
                return bad("ego_lane out of range");
            }
        }
        if let Some(ts) = &self.traffic {
            if ts.iter().any(|s| s.lane >= self.lane_count || s.speed < 0.0) {
                return bad("traffic spawn lane out of range or negative speed");
            }
        }
        Ok(())
    }

    pub fn road(&self) -> RoadGeometry {
        RoadGeometry {
            lane_count: self.lane_count,
            lane_width: self.lane_width,
        }
    }
}

/// Straight road: lane `i` spans `y in [i*w, (i+1)*w)`, boundaries at
/// `y = 0` and `y = lane_count * w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadGeometry {
    pub lane_count: usize,
    pub lane_width: f64,
}

impl RoadGeometry {
    pub fn width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    pub fn lane_of(&self, y: f64) -> i32 {
        let raw = (y / self.lane_width).floor() as i64;
        raw.clamp(0, self.lane_count as i64 - 1) as i32
    }

    /// Lateral distance to the closest interior lane line, if any exists.
    pub fn nearest_line_distance(&self, y: f64) -> Option<f64> {
        (1..self.lane_count)
            .map(|i| (y - i as f64 * self.lane_width).abs())
            .reduce(f64::min)
    }

    pub fn lateral_offset(&self, y: f64) -> f64 {
        y - self.width() / 2.0
    }

    fn line_hit(y_line: f64, origin: Vec2, dir: Vec2) -> Option<f64> {
        if dir.y.abs() < 1e-12 {
            return None;
        }
        let t = (y_line - origin.y) / dir.y;
        (t >= 0.0).then_some(t)
    }

    pub fn boundary_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        [0.0, self.width()]
            .into_iter()
            .filter_map(|y| Self::line_hit(y, origin, dir))
            .reduce(f64::min)
    }

    pub fn lane_line_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        (1..self.lane_count)
            .filter_map(|i| Self::line_hit(i as f64 * self.lane_width, origin, dir))
            .reduce(f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub rect: OrientedRect,
    pub speed: f64,
}

impl Vehicle {
    pub fn new(x: f64, y: f64, theta: f64, speed: f64) -> Self {
        Self {
            rect: OrientedRect {
                center: Vec2::new(x, y),
                heading: Vec2::from_angle(theta),
                length: VEHICLE_LENGTH,
                width: VEHICLE_WIDTH,
            },
            speed,
        }
    }

    /// LiDAR mount point: center of the front bumper.
    pub fn sensor_origin(&self) -> Vec2 {
        self.rect.center + self.rect.heading * (self.rect.length / 2.0)
    }
}

/// Snapshot of the world; vehicle 0 is the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub vehicles: Vec<Vehicle>,
    pub road: RoadGeometry,
    /// Extra static obstacles.
    pub walls: Vec<Segment>,
}

impl WorldState {
    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[0]
    }
}

fn nearest_hit(world: &WorldState, origin: Vec2, dir: Vec2, max_range: f64) -> f64 {
    let mut best = max_range;
    for v in &world.vehicles[1..] {
        if let Some(t) = v.rect.ray_hit(origin, dir, best) {
            best = best.min(t);
        }
    }
    if let Some(t) = world.road.boundary_hit(origin, dir) {
        best = best.min(t);
    }
    for w in &world.walls {
        if let Some(t) = crate::geometry::ray_segment(origin, dir, w) {
            best = best.min(t);
        }
    }
    best
}

/// Normalized LiDAR returns; beam `k` points at `2πk/beam_count` from the ego heading.
pub fn cast_lidar(world: &WorldState, beam_count: usize, max_range: f64) -> Vec<f64> {
    let ego = world.ego();
    let origin = ego.sensor_origin();
    (0..beam_count)
        .map(|k| {
            let rel = Vec2::from_angle(2.0 * PI * k as f64 / beam_count as f64);
            let dir = rel.rotate_by(ego.rect.heading);
            nearest_hit(world, origin, dir, max_range) / max_range
        })
        .collect()
}

/// Ray directions spread over the forward half-plane, relative to the heading.
fn forward_fan(count: usize) -> impl Iterator<Item = Vec2> {
    (0..count).map(move |k| Vec2::from_angle(-PI / 2.0 + PI * (k as f64 + 0.5) / count as f64))
}

fn cast_lane_detectors(world: &WorldState, count: usize, max_range: f64) -> Vec<f64> {
    let ego = world.ego();
    forward_fan(count)
        .map(|rel| {
            let dir = rel.rotate_by(ego.rect.heading);
            let t = world.road.lane_line_hit(ego.rect.center, dir).unwrap_or(max_range);
            t.min(max_range) / max_range
        })
        .collect()
}

fn cast_side_detectors(world: &WorldState, count: usize, max_range: f64) -> Vec<f64> {
    let ego = world.ego();
    forward_fan(count)
        .map(|rel| {
            let dir = rel.rotate_by(ego.rect.heading);
            let t = world.road.boundary_hit(ego.rect.center, dir).unwrap_or(max_range);
            t.min(max_range) / max_range
        })
        .collect()
}

/// Worst-case terminus check. A crash outranks leaving the road.
pub fn detect_wct(world: &WorldState) -> Option<WctKind> {
    let ego = world.ego();
    if world.vehicles[1..].iter().any(|v| rects_overlap(&ego.rect, &v.rect)) {
        return Some(WctKind::Crash);
    }
    if world.road.lateral_offset(ego.rect.center.y).abs() > world.road.width() / 2.0 {
        return Some(WctKind::OffRoad);
    }
    None
}

#[derive(Debug, Clone)]
struct TrafficDriver {
    idm: IdmParams,
    lane: usize,
    /// Commands waiting to be applied; the front is applied this step.
    pending: VecDeque<f64>,
    parked: bool,
    tailgated_for: usize,
    brake_left: usize,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    world: WorldState,
    ego_theta: f64,
    target_lane: usize,
    drivers: Vec<TrafficDriver>,
    rng: ChaCha8Rng,
    turn_sign: f64,
    weave_line: f64,
    weave_engaged: bool,
}

fn spawn_random_traffic(cfg: &ScenarioConfig, ego_lane: usize, rng: &mut ChaCha8Rng) -> Vec<TrafficSpawn> {
    let mut spawns: Vec<TrafficSpawn> = Vec::new();
    let mut attempts = 0;
    while spawns.len() < cfg.traffic_count && attempts < 200 * cfg.traffic_count.max(1) {
        attempts += 1;
        let lane = rng.random_range(0..cfg.lane_count);
        let x = rng.random_range(-60.0..220.0);
        if lane == ego_lane && !(x > 45.0 || x < -25.0) {
            continue;
        }
        if spawns.iter().any(|s| s.lane == lane && (s.x - x).abs() < 20.0) {
            continue;
        }
        let desired = rng.random_range(11.0..16.0);
        spawns.push(TrafficSpawn {
            lane,
            x,
            speed: desired * rng.random_range(0.85..1.0),
            desired_speed: desired,
            reaction_steps: None,
            time_headway: None,
        });
    }
    spawns
}

impl<'a> Sim<'a> {
    fn new(seed_value: u64, cfg: &'a ScenarioConfig) -> Self {
        let mut rng = seed::rng(seed::derive(seed_value, "simulate"));
        let road = cfg.road();
        let ego_lane = cfg.ego_lane.unwrap_or_else(|| rng.random_range(0..cfg.lane_count));
        let spawns = match &cfg.traffic {
            Some(ts) => ts.clone(),
            None => spawn_random_traffic(cfg, ego_lane, &mut rng),
        };
        let mut vehicles = vec![Vehicle::new(0.0, road.lane_center(ego_lane), 0.0, cfg.ego_initial_speed)];
        let mut drivers = Vec::with_capacity(spawns.len());
        for s in &spawns {
            vehicles.push(Vehicle::new(s.x, road.lane_center(s.lane), 0.0, s.speed));
            let delay = rng.random_range(3..=10);
            let headway = rng.random_range(0.8..1.6);
            let delay = s.reaction_steps.unwrap_or(delay);
            let idm = IdmParams {
                desired_speed: s.desired_speed,
                time_headway: s.time_headway.unwrap_or(headway),
                min_gap: 2.0,
                max_accel: 1.5,
                comfortable_decel: 2.5,
            };
            drivers.push(TrafficDriver {
                idm,
                lane: s.lane,
                pending: VecDeque::from(vec![0.0; delay]),
                parked: s.desired_speed <= 0.0,
                tailgated_for: 0,
                brake_left: 0,
            });
        }
        let turn_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        // weave along the line shared with a neighbouring lane
        let weave_line = if cfg.lane_count == 1 {
            road.lane_center(ego_lane)
        } else if ego_lane == 0 || (ego_lane + 1 < cfg.lane_count && rng.random_bool(0.5)) {
            (ego_lane + 1) as f64 * road.lane_width
        } else {
            ego_lane as f64 * road.lane_width
        };
        Self {
            cfg,
            world: WorldState {
                vehicles,
                road,
                walls: Vec::new(),
            },
            ego_theta: 0.0,
            target_lane: ego_lane,
            drivers,
            rng,
            turn_sign,
            weave_line,
            weave_engaged: false,
        }
    }

    /// Points the weave at the lane line next to the emptier neighbouring
    /// lane and returns that lane's clearance in meters.
    fn choose_weave_line(&mut self) -> f64 {
        let road = self.world.road;
        let ego = self.world.ego().rect.center;
        let lane = road.lane_of(ego.y) as usize;
        let clearance = |l: usize| {
            self.world.vehicles[1..]
                .iter()
                .filter(|v| road.lane_of(v.rect.center.y) as usize == l)
                .map(|v| (v.rect.center.x - ego.x).abs())
                .fold(f64::INFINITY, f64::min)
        };
        let below = (lane > 0).then(|| (lane as f64 * road.lane_width, clearance(lane - 1)));
        let above = (lane + 1 < road.lane_count).then(|| ((lane + 1) as f64 * road.lane_width, clearance(lane + 1)));
        let (line, clear) = match (below, above) {
            (Some(b), Some(a)) if b.1 > a.1 => b,
            (Some(b), Some(a)) if a.1 > b.1 => a,
            (Some(_), Some(_)) => (self.weave_line, below.map_or(f64::INFINITY, |b| b.1)),
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => (self.weave_line, f64::INFINITY),
        };
        self.weave_line = line;
        clear
    }

    /// Bumper gap to the nearest in-path vehicle behind vehicle `idx`.
    fn rear_gap(&self, idx: usize) -> Option<f64> {
        let me = &self.world.vehicles[idx];
        self.world
            .vehicles
            .iter()
            .enumerate()
            .filter(|&(j, v)| {
                j != idx
                    && v.rect.center.x < me.rect.center.x
                    && (v.rect.center.y - me.rect.center.y).abs() < IN_PATH_LATERAL
            })
            .map(|(_, v)| me.rect.center.x - v.rect.center.x - VEHICLE_LENGTH)
            .reduce(f64::min)
    }

    /// Nearest in-path vehicle ahead of vehicle `idx`: `(bumper gap, speed)`.
    fn lead_of(&self, idx: usize) -> Option<(f64, f64)> {
        let me = &self.world.vehicles[idx];
        let mut best: Option<(f64, f64)> = None;
        for (j, v) in self.world.vehicles.iter().enumerate() {
            if j == idx {
                continue;
            }
            let dx = v.rect.center.x - me.rect.center.x;
            let dy = (v.rect.center.y - me.rect.center.y).abs();
            if dx > 0.0 && dy < IN_PATH_LATERAL {
                let gap = dx - VEHICLE_LENGTH;
                if best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, v.speed * v.rect.heading.x));
                }
            }
        }
        best
    }

    fn observe(&self, prev_lane: Option<i32>) -> Observation {
        let cfg = self.cfg;
        let ego = self.world.ego();
        let y = ego.rect.center.y;
        let lane = self.world.road.lane_of(y);
        let near_line = self
            .world
            .road
            .nearest_line_distance(y)
            .is_some_and(|d| d < LINE_PROXIMITY);
        Observation {
            lidar: cast_lidar(&self.world, cfg.lidar_beam_count, cfg.lidar_range),
            lane: cast_lane_detectors(&self.world, cfg.lane_detector_count, cfg.lidar_range),
            side: cast_side_detectors(&self.world, cfg.side_detector_count, cfg.lidar_range),
            crossed_lane_line: near_line || prev_lane.is_some_and(|p| p != lane),
        }
    }

    /// Pure-pursuit steering command toward the lateral target `y_target`.
    fn pursue(&self, y_target: f64) -> f64 {
        let ego = self.world.ego();
        let lookahead = (0.6 * ego.speed).max(4.0);
        let alpha = (y_target - ego.rect.center.y).atan2(lookahead) - self.ego_theta;
        let delta = (2.0 * WHEELBASE * alpha.sin() / lookahead).atan();
        delta / MAX_STEER_ANGLE
    }

    fn expert_action(&self) -> (f64, f64) {
        let ego = self.world.ego();
        let idm = IdmParams::default();
        let accel = idm.accel(ego.speed, self.lead_of(0)) / MAX_ACCEL;
        let steer = self.pursue(self.world.road.lane_center(self.target_lane));
        (steer, accel)
    }

    fn scheduled_action(&self, sched: &AnomalySchedule, t: usize, expert: (f64, f64)) -> (f64, f64) {
        let tau = (t - sched.start) as f64;
        let m = sched.magnitude;
        let (expert_steer, expert_accel) = expert;
        let escalation = sched.escalation(t);
        match sched.kind {
            ScheduleKind::Zigzag => {
                let period = ZIGZAG_PERIOD;
                let phase = 2.0 * PI * tau / period;
                let full = ZIGZAG_STEER + (ZIGZAG_PEAK_STEER - ZIGZAG_STEER) * escalation;
                // the first half-cycle at half amplitude keeps the heading oscillation zero-mean
                let amp = if tau < period / 2.0 { full / 2.0 } else { full };
                // weak lane centering keeps the oscillation from drifting off the road
                let steer = self.turn_sign * m * amp * phase.sin() + 0.5 * expert_steer;
                (steer, expert_accel)
            }
            ScheduleKind::SuddenBraking => (expert_steer, -m),
            ScheduleKind::SuddenTurn => (self.turn_sign * 0.8 * m, expert_accel),
            ScheduleKind::LaneWeaving => {
                let period = 40.0;
                let u = (tau / period).fract();
                let tri = 4.0 * (u - 0.5).abs() - 1.0;
                let span = WEAVE_AMPLITUDE + (self.cfg.lane_width - WEAVE_AMPLITUDE) * escalation;
                // once escalating, the weaver stops reacting to traffic
                let accel = if escalation > 0.0 {
                    IdmParams::default().accel(self.world.ego().speed, None) / MAX_ACCEL
                } else {
                    expert_accel
                };
                (self.pursue(self.weave_line + span * m * tri), accel)
            }
            ScheduleKind::Tailgating => {
                let ego = self.world.ego();
                let accel = match self.lead_of(0) {
                    Some((gap, lead_v)) if gap < 60.0 => {
                        // close in at a bounded rate, then hold a 1.5 m / magnitude bumper gap
                        let target = 1.5 / m.max(0.1);
                        let closing = (2.0 * 1.5 * (gap - target).max(0.0)).sqrt().min(6.0);
                        let correction = 0.5 * (gap - target).min(0.0);
                        1.5 * (lead_v + closing + correction - ego.speed) / MAX_ACCEL
                    }
                    lead => {
                        let idm = IdmParams {
                            time_headway: 0.3,
                            ..IdmParams::default()
                        };
                        idm.accel(ego.speed, lead) / MAX_ACCEL
                    }
                };
                (expert_steer, accel)
            }
            ScheduleKind::ConstantThrottle => (expert_steer, m),
        }
    }

    fn ego_state(&self) -> KinematicState {
        let ego = self.world.ego();
        KinematicState {
            x: ego.rect.center.x,
            y: ego.rect.center.y,
            hx: ego.rect.heading.x,
            hy: ego.rect.heading.y,
            speed: ego.speed,
            lane: self.world.road.lane_of(ego.rect.center.y),
        }
    }

    fn step_ego(&mut self, action: Action) {
        let dt = self.cfg.dt;
        let ego = &mut self.world.vehicles[0];
        let v = ego.speed;
        let c = ego.rect.center;
        ego.rect.center = Vec2::new(c.x + v * self.ego_theta.cos() * dt, c.y + v * self.ego_theta.sin() * dt);
        let yaw_rate = v / WHEELBASE * (MAX_STEER_ANGLE * action.steer).tan();
        self.ego_theta += yaw_rate * dt;
        ego.rect.heading = Vec2::from_angle(self.ego_theta);
        ego.speed = (v + MAX_ACCEL * action.accel * dt).max(0.0);
    }

    fn step_traffic(&mut self) {
        let dt = self.cfg.dt;
        let sensed: Vec<(f64, bool)> = (0..self.drivers.len())
            .map(|i| {
                let d = &self.drivers[i];
                let tailgated = self.rear_gap(i + 1).is_some_and(|g| g < TAILGATED_GAP);
                if d.parked {
                    return (-TRAFFIC_MAX_DECEL, tailgated);
                }
                (d.idm.accel(self.world.vehicles[i + 1].speed, self.lead_of(i + 1)), tailgated)
            })
            .collect();
        for (i, (cmd, tailgated)) in sensed.into_iter().enumerate() {
            let d = &mut self.drivers[i];
            if !d.parked && self.rng.random_bool(0.003) {
                let shift = self.rng.random_range(-2.0..2.0);
                d.idm.desired_speed = (d.idm.desired_speed + shift).clamp(9.0, 17.0);
            }
            d.tailgated_for = if tailgated { d.tailgated_for + 1 } else { 0 };
            if d.brake_left == 0
                && !d.parked
                && d.tailgated_for >= BRAKE_CHECK_PATIENCE
                && self.rng.random_bool(BRAKE_CHECK_PROB)
            {
                d.brake_left = BRAKE_CHECK_STEPS;
            }
            d.pending.push_back(cmd.clamp(-TRAFFIC_MAX_DECEL, d.idm.max_accel));
            let mut applied = d.pending.pop_front().unwrap_or(0.0);
            if d.brake_left > 0 {
                d.brake_left -= 1;
                applied = -TRAFFIC_MAX_DECEL;
            }
            let v = &mut self.world.vehicles[i + 1];
            v.rect.center.x += v.speed * dt;
            v.speed = (v.speed + applied * dt).max(0.0);
            debug_assert_eq!(self.world.road.lane_of(v.rect.center.y) as usize, d.lane);
        }
    }
}

fn scenario_meta(seed_value: u64, cfg: &ScenarioConfig, ego_lane: usize) -> BTreeMap<String, Value> {
    let mut meta = BTreeMap::new();
    meta.insert("dt".into(), Value::from(cfg.dt));
    meta.insert("lane_count".into(), Value::from(cfg.lane_count));
    meta.insert("lane_width".into(), Value::from(cfg.lane_width));
    meta.insert("road_length".into(), Value::from(cfg.road_length));
    meta.insert("traffic_count".into(), Value::from(cfg.traffic.as_ref().map_or(cfg.traffic_count, Vec::len)));
    meta.insert("lidar_beam_count".into(), Value::from(cfg.lidar_beam_count));
    meta.insert("lidar_range".into(), Value::from(cfg.lidar_range));
    meta.insert("epsilon".into(), Value::from(cfg.expert_action_noise));
    meta.insert("ego_lane".into(), Value::from(ego_lane));
    meta.insert("ego_initial_speed".into(), Value::from(cfg.ego_initial_speed));
    meta.insert("scenario_seed".into(), Value::from(seed_value));
    match &cfg.anomaly_schedule {
        Some(s) => {
            meta.insert("anomaly".into(), Value::from(s.kind.as_str()));
            meta.insert("anomaly_start".into(), Value::from(s.start));
            meta.insert("anomaly_duration".into(), Value::from(s.duration.min(cfg.max_steps)));
            meta.insert("anomaly_magnitude".into(), Value::from(s.magnitude));
        }
        None => {
            meta.insert("anomaly".into(), Value::from("none"));
        }
    }
    meta
}

/// Runs one episode. The trajectory is a pure function of `(seed, cfg)`.
pub fn simulate_scenario(seed_value: u64, cfg: &ScenarioConfig) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(seed_value, cfg);
    let ego_lane = sim.target_lane;
    let mut noise_rng = seed::rng(seed::derive(seed_value, "action-noise"));
    let eps = cfg.expert_action_noise;
    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut wct = None;
    let mut termination = "max_steps";
    let mut prev_lane = None;
    let mut was_scripted = false;

    for t in 0..cfg.max_steps {
        let obs = sim.observe(prev_lane);
        let state = sim.ego_state();
        prev_lane = Some(state.lane);

        let scripted = cfg.anomaly_schedule.filter(|s| s.contains(t));
        if was_scripted && scripted.is_none() {
            // resume lane keeping in whichever lane the ego ended up
            sim.target_lane = state.lane as usize;
        }
        if !was_scripted {
            sim.weave_engaged = false;
        }
        if !sim.weave_engaged && scripted.is_some_and(|s| s.kind == ScheduleKind::LaneWeaving) {
            sim.weave_engaged = sim.choose_weave_line() > WEAVE_CLEARANCE;
        }
        was_scripted = scripted.is_some();
        let expert = sim.expert_action();
        // noise is drawn every step so scripted windows do not shift later draws
        let noise = if eps > 0.0 {
            (noise_rng.random_range(-eps..=eps), noise_rng.random_range(-eps..=eps))
        } else {
            (0.0, 0.0)
        };
        let (steer, accel) = match scripted {
            Some(s) if s.kind == ScheduleKind::LaneWeaving && !sim.weave_engaged => expert,
            Some(s) => sim.scheduled_action(&s, t, expert),
            None => (expert.0 + noise.0, expert.1 + noise.1),
        };
        let action = Action::clamped(steer, accel);
        steps.push(TimeStep {
            t,
            obs,
            state,
            action,
            reward: None,
        });

        if let Some(kind) = detect_wct(&sim.world) {
            wct = Some(WctEvent { kind, step: t });
            termination = "wct";
            break;
        }
        if state.x >= cfg.road_length {
            termination = "arrived";
            break;
        }
        sim.step_ego(action);
        sim.step_traffic();
    }

    let mut meta = scenario_meta(seed_value, cfg, ego_lane);
    meta.insert("termination".into(), Value::from(termination));
    Ok(Trajectory {
        id: format!("traj-{seed_value:06}"),
        seed: seed_value,
        meta,
        wct,
        wct_label: wct.is_some() as u8,
        anomaly_labels: AnomalyLabelSet::default(),
        steps,
        src: None,
        prefix_len: None,
    })
}

/// Assignment of expert noise levels and scripted anomalies to seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSpec {
    /// Seed `i` of the range gets `epsilon_ladder[i % len]`.
    pub epsilon_ladder: Vec<f64>,
    /// Probability that a seed also carries a scripted anomaly.
    pub anomaly_fraction: f64,
    pub anomaly_kinds: Vec<ScheduleKind>,
    /// Noise level for seeds that carry a scripted anomaly; the ladder value when absent.
    pub anomaly_epsilon: Option<f64>,
    /// Half-open range of scripted anomaly start steps.
    pub anomaly_onset: [usize; 2],
    /// Randomize lane count, traffic density and initial speed per seed.
    pub randomize: bool,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            epsilon_ladder: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            anomaly_fraction: 0.0,
            anomaly_kinds: ScheduleKind::ANOMALIES.to_vec(),
            anomaly_epsilon: None,
            anomaly_onset: [60, 160],
            randomize: true,
        }
    }
}

impl MixSpec {
    pub fn expert_ladder() -> Self {
        Self::default()
    }

    pub fn all(kind: ScheduleKind) -> Self {
        Self {
            epsilon_ladder: vec![0.0],
            anomaly_fraction: 1.0,
            anomaly_kinds: vec![kind],
            anomaly_epsilon: None,
            anomaly_onset: [60, 160],
            randomize: true,
        }
    }

    pub fn clean() -> Self {
        Self {
            epsilon_ladder: vec![0.0],
            ..Self::default()
        }
    }
}

/// Randomized schedule for `kind` starting within `onset`.
pub fn random_schedule(kind: ScheduleKind, onset: [usize; 2], rng: &mut ChaCha8Rng) -> AnomalySchedule {
    let start = rng.random_range(onset[0]..onset[1].max(onset[0] + 1));
    let (duration, magnitude) = match kind {
        ScheduleKind::Zigzag => (rng.random_range(100..140), rng.random_range(0.5..1.0)),
        ScheduleKind::SuddenBraking => (rng.random_range(20..40), rng.random_range(0.9..1.0)),
        ScheduleKind::SuddenTurn => (8, rng.random_range(0.6..1.0)),
        ScheduleKind::LaneWeaving => (rng.random_range(100..150), rng.random_range(0.8..1.2)),
        ScheduleKind::Tailgating => (rng.random_range(130..180), rng.random_range(0.8..1.2)),
        ScheduleKind::ConstantThrottle => (usize::MAX, 0.5),
    };
    AnomalySchedule {
        kind,
        start,
        duration,
        magnitude,
    }
}

/// Per-seed scenario configuration drawn from `template` and `mix`.
pub fn scenario_for_seed(index: usize, seed_value: u64, template: &ScenarioConfig, mix: &MixSpec) -> ScenarioConfig {
    let mut rng = seed::rng(seed::derive(seed_value, "scenario"));
    let mut cfg = template.clone();
    if mix.randomize {
        cfg.lane_count = rng.random_range(2..=4);
        let base = template.traffic_count.max(1);
        cfg.traffic_count = rng.random_range(base / 2..=base + base / 2);
        cfg.ego_initial_speed = rng.random_range(10.0..14.0);
    }
    cfg.ego_lane = Some(rng.random_range(0..cfg.lane_count));
    if !mix.epsilon_ladder.is_empty() {
        cfg.expert_action_noise = mix.epsilon_ladder[index % mix.epsilon_ladder.len()];
    }
    let anomalous = mix.anomaly_fraction > 0.0 && rng.random::<f64>() < mix.anomaly_fraction;
    if anomalous && !mix.anomaly_kinds.is_empty() {
        let kind = mix.anomaly_kinds[rng.random_range(0..mix.anomaly_kinds.len())];
        let sched = random_schedule(kind, mix.anomaly_onset, &mut rng);
        if kind == ScheduleKind::Tailgating {
            // guarantee a slower vehicle ahead to tailgate
            let lane = cfg.ego_lane.unwrap_or(0);
            let desired = rng.random_range(10.0..13.0);
            let lead = TrafficSpawn {
                lane,
                x: rng.random_range(25.0..40.0),
                speed: desired,
                desired_speed: desired,
                reaction_steps: None,
                time_headway: None,
            };
            let mut spawns = spawn_random_traffic(&cfg, lane, &mut rng);
            spawns.retain(|s| !(s.lane == lane && s.x > 0.0 && s.x < lead.x + 25.0));
            spawns.push(lead);
            cfg.traffic = Some(spawns);
        }
        if kind == ScheduleKind::SuddenBraking {
            // a close, inattentive follower makes the stop dangerous
            let lane = cfg.ego_lane.unwrap_or(0);
            let speed = cfg.ego_initial_speed;
            let follower = TrafficSpawn {
                lane,
                x: -rng.random_range(10.0..16.0),
                speed,
                desired_speed: rng.random_range(16.0..17.0),
                reaction_steps: Some(rng.random_range(10..=20)),
                time_headway: Some(rng.random_range(0.5..0.9)),
            };
            let mut spawns = spawn_random_traffic(&cfg, lane, &mut rng);
            spawns.retain(|s| !(s.lane == lane && s.x < 0.0 && s.x > follower.x - 25.0));
            spawns.push(follower);
            cfg.traffic = Some(spawns);
        }
        if kind == ScheduleKind::LaneWeaving {
            // slower vehicles in the neighbouring lanes that the weaver catches up with
            let lane = cfg.ego_lane.unwrap_or(0);
            let neighbours: Vec<usize> = [lane.checked_sub(1), Some(lane + 1)]
                .into_iter()
                .flatten()
                .filter(|&l| l < cfg.lane_count)
                .collect();
            let mut spawns = spawn_random_traffic(&cfg, lane, &mut rng);
            spawns.retain(|s| !(neighbours.contains(&s.lane) && s.x > -10.0 && s.x < 260.0));
            for &l in &neighbours {
                let mut x = rng.random_range(90.0..130.0);
                while x < 250.0 {
                    let desired = rng.random_range(8.0..11.0);
                    spawns.push(TrafficSpawn {
                        lane: l,
                        x,
                        speed: desired,
                        desired_speed: desired,
                        reaction_steps: None,
                        time_headway: None,
                    });
                    x += rng.random_range(25.0..45.0);
                }
            }
            cfg.traffic = Some(spawns);
        }
        cfg.anomaly_schedule = Some(sched);
        if let Some(eps) = mix.anomaly_epsilon {
            cfg.expert_action_noise = eps;
        }
    }
    cfg
}

/// Simulates one trajectory per seed, in seed order.
pub fn generate_dataset(seeds: Range<u64>, template: &ScenarioConfig, mix: &MixSpec) -> Result<Vec<Trajectory>, SimError> {
    if seeds.is_empty() {
        return Err(SimError::EmptySeeds);
    }
    template.validate()?;
    let start = seeds.start;
    seeds
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| {
            let cfg = scenario_for_seed((s - start) as usize, s, template, mix);
            simulate_scenario(s, &cfg)
        })
        .collect()
}

/// Rejects seed ranges that share any seed.
pub fn check_disjoint(expert: &Range<u64>, test: &Range<u64>) -> Result<(), SimError> {
    if expert.is_empty() || test.is_empty() {
        return Err(SimError::EmptySeeds);
    }
    if expert.start < test.end && test.start < expert.end {
        return Err(SimError::OverlappingSeeds {
            expert: expert.clone(),
            test: test.clone(),
        });
    }
    Ok(())
}
