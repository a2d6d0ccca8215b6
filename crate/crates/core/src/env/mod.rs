//! Point-mass tasks with hidden per-episode physics multipliers.
//!
//! The agent is a 2D point mass driven by a clipped force command. Each episode
//! draws [`HiddenParams`] that scale mass, damping, friction and gravity; the
//! agent never observes them. Costs are indicators of a Lipschitz margin
//! function [`nu`] crossing zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Reach goals while keeping clear of static obstacles.
    Navigation,
    /// Circle the origin while staying inside an axis-aligned safe region.
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: Task,
    pub obstacle_count: usize,
    /// Number of nearest obstacles reported by the sensor.
    pub sensor_slots: usize,
    pub safe_distance: f64,
    pub arena_half_width: f64,
    pub dt: f64,
    pub horizon: usize,
    pub v_max: f64,
    pub goal_radius: f64,
    pub goal_bonus: f64,
    pub mass: f64,
    pub damping: f64,
    pub friction: f64,
    pub gravity: f64,
    /// Velocity scale of the smooth friction surrogate `tanh(v / v_eps)`.
    pub friction_v_eps: f64,
    pub region_half_extent: [f64; 2],
    pub region_margin: f64,
    pub circle_radius: f64,
    pub placement_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::Navigation,
            obstacle_count: 4,
            sensor_slots: 4,
            safe_distance: 0.25,
            arena_half_width: 2.0,
            dt: 0.1,
            horizon: 400,
            v_max: 2.0,
            goal_radius: 0.3,
            goal_bonus: 1.0,
            mass: 0.25,
            damping: 4.0,
            friction: 0.015,
            gravity: 9.81,
            friction_v_eps: 0.05,
            region_half_extent: [1.125, 1.125],
            region_margin: 0.05,
            circle_radius: 0.8,
            placement_attempts: 1000,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("safe_distance", self.safe_distance),
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("arena_half_width", self.arena_half_width),
            ("mass", self.mass),
            ("friction_v_eps", self.friction_v_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be positive".into()));
        }
        if self.damping < 0.0 || self.friction < 0.0 || self.gravity < 0.0 || self.region_margin < 0.0 {
            return Err(Error::Config("env physical constants must be non-negative".into()));
        }
        Ok(())
    }

    /// Bound on `‖pos(s') - pos(s)‖` for a single step. Obstacles are static,
    /// so this is also the bound on the change of all safety features.
    pub fn max_feature_step(&self) -> f64 {
        self.dt * self.v_max
    }

    pub fn observation_dim(&self) -> usize {
        6 + 2 * self.sensor_slots
    }
}

/// Per-episode multipliers on the base physical constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub gravity_scale: f64,
    pub mass_scale: f64,
    pub damping_scale: f64,
    pub friction_scale: f64,
}

impl HiddenParams {
    pub const DIM: usize = 4;

    pub fn nominal() -> Self {
        Self {
            gravity_scale: 1.0,
            mass_scale: 1.0,
            damping_scale: 1.0,
            friction_scale: 1.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.gravity_scale,
            self.mass_scale,
            self.damping_scale,
            self.friction_scale,
        ]
    }
}

/// Draws each multiplier independently: pick one interval uniformly, then a
/// value uniformly inside it.
pub fn sample_phi<R: Rng + ?Sized>(rng: &mut R, intervals: &[[f64; 2]]) -> Result<HiddenParams> {
    if intervals.is_empty() {
        return Err(Error::InvalidArgument("no sampling intervals".into()));
    }
    if let Some(bad) = intervals.iter().find(|[lo, hi]| !(lo <= hi) || *lo <= 0.0) {
        return Err(Error::InvalidArgument(format!("bad sampling interval {bad:?}")));
    }
    let mut draw = || {
        let [lo, hi] = intervals[rng.random_range(0..intervals.len())];
        lo + (hi - lo) * rng.random::<f64>()
    };
    Ok(HiddenParams {
        gravity_scale: draw(),
        mass_scale: draw(),
        damping_scale: draw(),
        friction_scale: draw(),
    })
}

/// Position and velocity: the part of the state governed by the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl Kinematics {
    pub const DIM: usize = 4;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        crate::error::check_len("kinematic state", Self::DIM, s.len())?;
        Ok(Self {
            position: [s[0], s[1]],
            velocity: [s[2], s[3]],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    /// Goal minus position.
    pub goal_rel: [f64; 2],
    /// Nearest obstacles relative to the agent, ascending by distance,
    /// flattened as `[x0, y0, x1, y1, ...]`.
    pub sensor: Vec<f64>,
    pub step_index: usize,
}

impl EnvState {
    pub fn kinematics(&self) -> Kinematics {
        Kinematics {
            position: self.position,
            velocity: self.velocity,
        }
    }

    /// Coordinate projection onto the position (1-Lipschitz).
    pub fn pos(&self) -> [f64; 2] {
        self.position
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: [f64; 2],
    pub next_state: EnvState,
    pub reward: f64,
    pub cost: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub obstacles: Vec<[f64; 2]>,
    pub goal: [f64; 2],
}

/// Replay record of one episode's layout and parameter draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub phi: HiddenParams,
    pub obstacles: Vec<[f64; 2]>,
    pub goal: [f64; 2],
    pub start: [f64; 2],
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Safety margin ν(e(s), E): positive means safe, `<= 0` means cost.
///
/// Navigation: `min_i ‖pos - X_i‖ - d` (`+∞` without obstacles).
/// Circle: distance from the complement of the shrunk region,
/// `min(hx - |x|, hy - |y|) - margin`. Both are 1-Lipschitz in `pos`.
pub fn nu(pos: [f64; 2], obstacles: &[[f64; 2]], config: &EnvConfig) -> f64 {
    match config.task {
        Task::Navigation => {
            obstacles.iter().map(|&x| dist(pos, x)).fold(f64::INFINITY, f64::min) - config.safe_distance
        }
        Task::Circle => {
            let [hx, hy] = config.region_half_extent;
            (hx - pos[0].abs()).min(hy - pos[1].abs()) - config.region_margin
        }
    }
}

/// Indicator cost of arriving in `next_state`: `1{ν ≤ 0}`.
pub fn cost_fn(next_state: &EnvState, obstacles: &[[f64; 2]], config: &EnvConfig) -> u8 {
    u8::from(nu(next_state.position, obstacles, config) <= 0.0)
}

/// One semi-implicit Euler step of the point mass.
pub fn integrate(kin: &Kinematics, action: [f64; 2], phi: &HiddenParams, config: &EnvConfig) -> Kinematics {
    let m = config.mass * phi.mass_scale;
    let c = config.damping * phi.damping_scale;
    let fr = config.friction * phi.friction_scale * config.gravity * phi.gravity_scale;
    let mut v = [0.0; 2];
    for i in 0..2 {
        let a = action[i].clamp(-1.0, 1.0);
        let vi = kin.velocity[i];
        let acc = a / m - c * vi - fr * (vi / config.friction_v_eps).tanh();
        v[i] = vi + config.dt * acc;
    }
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if speed > config.v_max {
        let s = config.v_max / speed;
        v = [v[0] * s, v[1] * s];
    }
    let mut p = [kin.position[0] + config.dt * v[0], kin.position[1] + config.dt * v[1]];
    let w = config.arena_half_width;
    for i in 0..2 {
        if p[i].abs() > w {
            p[i] = p[i].clamp(-w, w);
            v[i] = 0.0;
        }
    }
    Kinematics {
        position: p,
        velocity: v,
    }
}

/// Builds the full observation-level state for kinematics `kin` in `layout`.
pub fn observe(kin: &Kinematics, layout: &Layout, config: &EnvConfig, step_index: usize) -> EnvState {
    let p = kin.position;
    let mut rel: Vec<[f64; 2]> = layout.obstacles.iter().map(|x| [x[0] - p[0], x[1] - p[1]]).collect();
    rel.sort_by(|a, b| (a[0].hypot(a[1])).total_cmp(&b[0].hypot(b[1])));
    rel.truncate(config.sensor_slots);
    EnvState {
        position: p,
        velocity: kin.velocity,
        goal_rel: [layout.goal[0] - p[0], layout.goal[1] - p[1]],
        sensor: rel.into_iter().flatten().collect(),
        step_index,
    }
}

/// Fixed-width policy input: position, velocity, goal offset, sensor slots.
/// Empty sensor slots read as a far-away obstacle.
pub fn observation_vector(state: &EnvState, config: &EnvConfig) -> Vec<f64> {
    let mut obs = Vec::with_capacity(config.observation_dim());
    obs.extend_from_slice(&state.position);
    obs.extend_from_slice(&state.velocity);
    obs.extend_from_slice(&state.goal_rel);
    obs.extend_from_slice(&state.sensor);
    let far = 2.0 * config.arena_half_width;
    obs.resize(config.observation_dim(), far);
    obs
}

/// One episode of a point-mass task.
#[derive(Debug, Clone)]
pub struct PointEnv {
    config: EnvConfig,
    phi: HiddenParams,
    layout: Layout,
    kin: Kinematics,
    step_index: usize,
    seed: u64,
    start: [f64; 2],
    rng: ChaCha8Rng,
}

impl PointEnv {
    pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, phi: HiddenParams, rng: &mut R) -> Result<Self> {
        Self::reset_seeded(config, phi, rng.random())
    }

    pub fn reset_seeded(config: &EnvConfig, phi: HiddenParams, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, start) = match config.task {
            Task::Navigation => place_navigation(config, &mut rng)?,
            Task::Circle => {
                let r = 0.5_f64.min(config.region_half_extent[0] / 2.0);
                let start = [rng.random_range(-r..r), rng.random_range(-r..r)];
                (
                    Layout {
                        obstacles: Vec::new(),
                        goal: [0.0, 0.0],
                    },
                    start,
                )
            }
        };
        Ok(Self {
            config: config.clone(),
            phi,
            layout,
            kin: Kinematics {
                position: start,
                velocity: [0.0, 0.0],
            },
            step_index: 0,
            seed,
            start,
            rng,
        })
    }

    /// Rebuilds the episode described by `record`.
    pub fn replay(config: &EnvConfig, record: &EpisodeRecord) -> Result<Self> {
        let env = Self::reset_seeded(config, record.phi, record.seed)?;
        if env.record() != *record {
            return Err(Error::InvalidArgument("record does not match this env config".into()));
        }
        Ok(env)
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            seed: self.seed,
            phi: self.phi,
            obstacles: self.layout.obstacles.clone(),
            goal: self.initial_goal(),
            start: self.start,
        }
    }

    fn initial_goal(&self) -> [f64; 2] {
        // the goal can move during the episode; replay from the seed
        match self.config.task {
            Task::Navigation => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                place_navigation(&self.config, &mut rng)
                    .map(|(l, _)| l.goal)
                    .unwrap_or(self.layout.goal)
            }
            Task::Circle => [0.0, 0.0],
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn phi(&self) -> &HiddenParams {
        &self.phi
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn kinematics(&self) -> Kinematics {
        self.kin
    }

    pub fn state(&self) -> EnvState {
        observe(&self.kin, &self.layout, &self.config, self.step_index)
    }

    /// State the agent would observe at kinematics `kin` in the current layout.
    pub fn observe(&self, kin: &Kinematics) -> EnvState {
        observe(kin, &self.layout, &self.config, self.step_index)
    }

    pub fn observation(&self) -> Vec<f64> {
        observation_vector(&self.state(), &self.config)
    }

    pub fn nu_at(&self, pos: [f64; 2]) -> f64 {
        nu(pos, &self.layout.obstacles, &self.config)
    }

    pub fn done(&self) -> bool {
        self.step_index >= self.config.horizon
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<Transition> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        if self.done() {
            return Err(Error::StateMachine("step called after the horizon"));
        }
        let state = self.state();
        let clipped = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let next = integrate(&self.kin, clipped, &self.phi, &self.config);
        let reward = match self.config.task {
            Task::Navigation => {
                let before = dist(self.kin.position, self.layout.goal);
                let after = dist(next.position, self.layout.goal);
                let mut r = before - after;
                if after <= self.config.goal_radius {
                    r += self.config.goal_bonus;
                    self.layout.goal = place_goal(&self.config, &self.layout.obstacles, next.position, &mut self.rng)?;
                }
                r
            }
            Task::Circle => {
                let [x, y] = next.position;
                let [vx, vy] = next.velocity;
                let r = x.hypot(y).max(1e-6);
                let tangential = (x * vy - y * vx) / r;
                self.config.dt * (tangential - (r - self.config.circle_radius).abs())
            }
        };
        self.kin = next;
        self.step_index += 1;
        let next_state = self.state();
        let cost = cost_fn(&next_state, &self.layout.obstacles, &self.config);
        Ok(Transition {
            state,
            action: clipped,
            next_state,
            reward,
            cost,
        })
    }
}

fn uniform_point<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> [f64; 2] {
    let w = config.arena_half_width - 0.3;
    [rng.random_range(-w..w), rng.random_range(-w..w)]
}

fn place_navigation<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Result<(Layout, [f64; 2])> {
    let clearance = 2.0 * config.safe_distance;
    let mut placed: Vec<[f64; 2]> = Vec::with_capacity(config.obstacle_count + 2);
    for _ in 0..config.obstacle_count + 2 {
        let mut ok = false;
        for _ in 0..config.placement_attempts {
            let p = uniform_point(config, rng);
            if placed.iter().all(|&q| dist(p, q) > clearance) {
                placed.push(p);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Layout(config.placement_attempts));
        }
    }
    let start = placed.pop().unwrap();
    let goal = placed.pop().unwrap();
    Ok((
        Layout {
            obstacles: placed,
            goal,
        },
        start,
    ))
}

fn place_goal<R: Rng + ?Sized>(
    config: &EnvConfig,
    obstacles: &[[f64; 2]],
    agent: [f64; 2],
    rng: &mut R,
) -> Result<[f64; 2]> {
    let clearance = 2.0 * config.safe_distance;
    for _ in 0..config.placement_attempts {
        let p = uniform_point(config, rng);
        if obstacles.iter().all(|&q| dist(p, q) > clearance) && dist(p, agent) > clearance.max(config.goal_radius) {
            return Ok(p);
        }
    }
    Err(Error::Layout(config.placement_attempts))
}
