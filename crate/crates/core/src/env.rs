//! The discrete three-lane driving world.
//!
//! A vehicle state is a `(position, lane, velocity)` triple on a small grid.
//! The planner and the driver each pick one of six [`Action`]s per step and
//! their velocity and lane deltas add up. Utilities are the negative sum of
//! four cost terms evaluated at the successor state.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::UtilityTable;

/// Lower bound applied to the weighted obstacle distance before taking its log.
pub const OBSTACLE_DISTANCE_FLOOR: f64 = 0.1;

/// Number of actions available to each agent.
pub const NUM_ACTIONS: usize = 6;

/// A discrete vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct VehicleState {
    /// Horizontal cell.
    pub p: usize,
    /// Lane.
    pub y: usize,
    /// Velocity level.
    pub v: usize,
}

impl VehicleState {
    pub const fn new(p: usize, y: usize, v: usize) -> Self {
        Self { p, y, v }
    }
}

impl From<[usize; 3]> for VehicleState {
    fn from([p, y, v]: [usize; 3]) -> Self {
        Self { p, y, v }
    }
}

impl From<VehicleState> for [usize; 3] {
    fn from(x: VehicleState) -> Self {
        [x.p, x.y, x.v]
    }
}

impl fmt::Display for VehicleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.p, self.y, self.v)
    }
}

impl FromStr for VehicleState {
    type Err = Error;

    /// Parses `p,y,v`, optionally wrapped in brackets.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('[').trim_end_matches(']');
        let parts: Vec<usize> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("invalid state `{s}`")))?;
        match parts.as_slice() {
            [p, y, v] => Ok(Self::new(*p, *y, *v)),
            _ => Err(Error::Parse(format!("state `{s}` must have three components"))),
        }
    }
}

/// The six symbolic driving actions. `Keep` is index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Keep = 0,
    Accel = 1,
    Decel = 2,
    Left = 3,
    Right = 4,
    Stop = 5,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Keep,
        Action::Accel,
        Action::Decel,
        Action::Left,
        Action::Right,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Keep => "keep",
            Action::Accel => "accel",
            Action::Decel => "decel",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stop => "stop",
        }
    }

    /// Velocity delta contributed by this action (stop is handled separately).
    pub fn velocity_delta(self) -> i64 {
        match self {
            Action::Accel => 1,
            Action::Decel => -1,
            _ => 0,
        }
    }

    /// Lane delta contributed by this action.
    pub fn lane_delta(self) -> i64 {
        match self {
            Action::Left => 1,
            Action::Right => -1,
            _ => 0,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown action `{s}`")))
    }
}

/// Grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(rename = "P")]
    pub positions: usize,
    #[serde(rename = "L")]
    pub lanes: usize,
    #[serde(rename = "V")]
    pub velocities: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { positions: 10, lanes: 3, velocities: 3 }
    }
}

/// Binary schedule of the stages at which the driver actually decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct DecisionSchedule(Vec<bool>);

impl DecisionSchedule {
    /// Builds a schedule, requiring at least one and strictly fewer than
    /// `len` decision stages.
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        let k = flags.iter().filter(|&&f| f).count();
        if k == 0 || k >= flags.len() {
            return Err(Error::InvalidScenario(format!(
                "decision schedule must have 0 < K < T, got K={k}, T={}",
                flags.len()
            )));
        }
        Ok(Self(flags))
    }

    /// The single-stage schedule `[1]` of a static leader-follower game.
    ///
    /// This is the one schedule allowed to have `K == T`.
    pub fn single_decision() -> Self {
        Self(vec![true])
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn decides(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn decisions(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    /// Schedule seen from absolute time `offset`: entry `t` is `σ((offset + t) mod T)`.
    pub fn rotated(&self, offset: usize) -> Vec<bool> {
        let n = self.0.len();
        (0..n).map(|t| self.0[(offset + t) % n]).collect()
    }
}

impl Default for DecisionSchedule {
    fn default() -> Self {
        Self(vec![true, false, false, true, false])
    }
}

impl TryFrom<Vec<u8>> for DecisionSchedule {
    type Error = Error;

    fn try_from(raw: Vec<u8>) -> Result<Self> {
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::InvalidScenario("sigma entries must be 0 or 1".into()));
        }
        let flags: Vec<bool> = raw.into_iter().map(|b| b == 1).collect();
        if flags == [true] {
            return Ok(Self::single_decision());
        }
        Self::new(flags)
    }
}

impl From<DecisionSchedule> for Vec<u8> {
    fn from(s: DecisionSchedule) -> Self {
        s.0.into_iter().map(u8::from).collect()
    }
}

/// Full scenario configuration. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub grid: Grid,
    /// Obstacle cells as `(p, y)`.
    pub obstacles: Vec<[usize; 2]>,
    pub goal: VehicleState,
    pub goal_reward: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub sigma: DecisionSchedule,
    pub lambda: f64,
    pub gamma: f64,
    pub max_episode_steps: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            obstacles: vec![[4, 0], [5, 1]],
            goal: VehicleState::new(9, 0, 0),
            goal_reward: 5.0,
            horizon: 5,
            sigma: DecisionSchedule::default(),
            lambda: 10.0,
            gamma: 1.0,
            max_episode_steps: 30,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.positions == 0 || g.lanes == 0 || g.velocities == 0 {
            return Err(Error::InvalidScenario("grid dimensions must be positive".into()));
        }
        if !self.in_bounds(self.goal) {
            return Err(Error::InvalidScenario(format!("goal {} outside grid", self.goal)));
        }
        for &[p, y] in &self.obstacles {
            if p >= g.positions || y >= g.lanes {
                return Err(Error::InvalidScenario(format!("obstacle ({p},{y}) outside grid")));
            }
        }
        if self.is_obstacle(self.goal.p, self.goal.y) {
            return Err(Error::InvalidScenario("goal lies on an obstacle".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidScenario("lambda must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidScenario("gamma must lie in (0, 1]".into()));
        }
        if self.horizon == 0 || self.sigma.horizon() != self.horizon {
            return Err(Error::InvalidScenario(format!(
                "horizon T={} does not match sigma length {}",
                self.horizon,
                self.sigma.horizon()
            )));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::InvalidScenario("max_episode_steps must be positive".into()));
        }
        if !self.goal_reward.is_finite() {
            return Err(Error::InvalidScenario("goal_reward must be finite".into()));
        }
        Ok(())
    }

    /// Number of states `P·L·V`.
    pub fn num_states(&self) -> usize {
        self.grid.positions * self.grid.lanes * self.grid.velocities
    }

    pub fn in_bounds(&self, x: VehicleState) -> bool {
        x.p < self.grid.positions && x.y < self.grid.lanes && x.v < self.grid.velocities
    }

    pub fn encode(&self, x: VehicleState) -> usize {
        debug_assert!(self.in_bounds(x));
        (x.p * self.grid.lanes + x.y) * self.grid.velocities + x.v
    }

    pub fn decode(&self, index: usize) -> VehicleState {
        let v = index % self.grid.velocities;
        let rest = index / self.grid.velocities;
        VehicleState::new(rest / self.grid.lanes, rest % self.grid.lanes, v)
    }

    pub fn states(&self) -> impl Iterator<Item = VehicleState> + '_ {
        (0..self.num_states()).map(|i| self.decode(i))
    }

    pub fn is_obstacle(&self, p: usize, y: usize) -> bool {
        self.obstacles.iter().any(|&[op, oy]| op == p && oy == y)
    }

    pub fn is_goal(&self, x: VehicleState) -> bool {
        x == self.goal
    }

    /// Deterministic joint dynamics.
    pub fn transition(&self, x: VehicleState, leader: Action, follower: Action) -> VehicleState {
        self.step(x, leader, follower).next
    }

    /// Joint dynamics with the bookkeeping needed by the cost terms.
    pub fn step(&self, x: VehicleState, leader: Action, follower: Action) -> Step {
        let g = &self.grid;
        let max_v = g.velocities as i64 - 1;
        let max_y = g.lanes as i64 - 1;
        let max_p = g.positions as i64 - 1;

        let v = if leader == Action::Stop || follower == Action::Stop {
            0
        } else {
            (x.v as i64 + leader.velocity_delta() + follower.velocity_delta()).clamp(0, max_v)
        };
        let lane_delta = leader.lane_delta() + follower.lane_delta();
        let raw_y = x.y as i64 + lane_delta;
        let raw_p = x.p as i64 + v;
        let out_of_bounds = raw_y < 0 || raw_y > max_y || raw_p > max_p;
        Step {
            next: VehicleState::new(raw_p.clamp(0, max_p) as usize, raw_y.clamp(0, max_y) as usize, v as usize),
            out_of_bounds,
            lane_delta,
        }
    }

    /// Terminal reward shared by both agents.
    pub fn terminal_reward(&self, x: VehicleState) -> f64 {
        if self.is_goal(x) {
            self.goal_reward
        } else {
            0.0
        }
    }
}

/// Result of one joint transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub next: VehicleState,
    /// The unclamped lane or position left the grid.
    pub out_of_bounds: bool,
    /// Net lane delta requested by both agents.
    pub lane_delta: i64,
}

/// Free function form of [`Scenario::transition`].
pub fn transition(x: VehicleState, leader: Action, follower: Action, s: &Scenario) -> VehicleState {
    s.transition(x, leader, follower)
}

/// Free function form of [`Scenario::terminal_reward`].
pub fn terminal_reward(x: VehicleState, s: &Scenario) -> f64 {
    s.terminal_reward(x)
}

/// Cost coefficients of one driver type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverTypeParams {
    pub type_id: u32,
    /// Horizontal and lateral distance-to-goal weights.
    pub c1: [f64; 2],
    /// Horizontal weight, lateral weight and log scale of the obstacle cost.
    pub c2: [f64; 3],
    /// Collision cost.
    pub c3: f64,
    /// Turning cost.
    pub c4: f64,
}

impl DriverTypeParams {
    /// Ids of the built-in presets.
    pub const PRESET_IDS: [u32; 5] = [1, 2, 3, 4, 5];

    pub fn preset(id: u32) -> Option<Self> {
        let (c1, c2, c4) = match id {
            1 => ([0.5, 0.01], [0.5, 1.0, 1.5], 0.0),
            2 => ([1.0, 0.1], [1.0, 2.0, 1.5], 0.0),
            3 => ([1.5, 0.1], [1.5, 2.5, 1.5], 0.0),
            4 => ([0.5, 0.0], [0.5, 0.6, 1.5], 1.0),
            5 => ([0.5, 0.01], [0.5, 0.5, 1.5], 1.0),
            _ => return None,
        };
        Some(Self { type_id: id, c1, c2, c3: 10.0, c4 })
    }

    pub fn presets() -> Vec<Self> {
        Self::PRESET_IDS.iter().filter_map(|&id| Self::preset(id)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.c1.iter().chain(&self.c2).chain([&self.c3, &self.c4]);
        if all.clone().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParams(format!("type {}: non-finite weight", self.type_id)));
        }
        if self.c3 <= 0.0 {
            return Err(Error::InvalidParams(format!("type {}: collision cost must be positive", self.type_id)));
        }
        Ok(())
    }
}

/// The four cost terms of one joint transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub distance: f64,
    pub obstacle: f64,
    pub collision: f64,
    pub turning: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.distance + self.obstacle + self.collision + self.turning
    }

    /// The utility is the negative total cost.
    pub fn utility(&self) -> f64 {
        -self.total()
    }
}

/// Cost terms of `(x, leader, follower)` evaluated at the successor state.
pub fn cost_terms(
    x: VehicleState,
    leader: Action,
    follower: Action,
    params: &DriverTypeParams,
    s: &Scenario,
) -> CostTerms {
    let step = s.step(x, leader, follower);
    let next = step.next;
    let dp = |a: usize, b: usize| a.abs_diff(b) as f64;

    let distance = params.c1[0] * dp(next.p, s.goal.p) + params.c1[1] * dp(next.y, s.goal.y);

    let obstacle = s
        .obstacles
        .iter()
        .map(|&[op, oy]| params.c2[0] * dp(next.p, op) + params.c2[1] * dp(next.y, oy))
        .min_by(f64::total_cmp)
        .map_or(0.0, |d| -params.c2[2] * d.max(OBSTACLE_DISTANCE_FLOOR).ln());

    let collision = if step.out_of_bounds || s.is_obstacle(next.p, next.y) { params.c3 } else { 0.0 };
    let turning = if step.lane_delta != 0 { params.c4 } else { 0.0 };

    CostTerms { distance, obstacle, collision, turning }
}

/// Ground-truth stage utility `g(x, uL, uF)`.
pub fn stage_cost(x: VehicleState, leader: Action, follower: Action, params: &DriverTypeParams, s: &Scenario) -> f64 {
    cost_terms(x, leader, follower, params, s).utility()
}

/// Tabulates [`stage_cost`] over every state and joint action.
pub fn build_utility_table(params: &DriverTypeParams, s: &Scenario) -> UtilityTable {
    let n = s.num_states();
    let mut data = Array3::zeros((n, NUM_ACTIONS, NUM_ACTIONS));
    for i in 0..n {
        let x = s.decode(i);
        for a in Action::ALL {
            for b in Action::ALL {
                data[[i, a.index(), b.index()]] = stage_cost(x, a, b, params, s);
            }
        }
    }
    UtilityTable::from_array(data)
}

/// Distribution over driver types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    pub types: Vec<u32>,
    pub weights: Vec<f64>,
}

impl TypeDistribution {
    pub fn new(types: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        let d = Self { types, weights };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() || self.types.len() != self.weights.len() {
            return Err(Error::InvalidParams("type distribution shape mismatch".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidParams("type weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("type weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Single-type population.
    pub fn single(type_id: u32) -> Self {
        Self { types: vec![type_id], weights: vec![1.0] }
    }
}

impl Default for TypeDistribution {
    fn default() -> Self {
        Self { types: vec![1, 2, 3, 4, 5], weights: vec![0.2, 0.3, 0.1, 0.2, 0.2] }
    }
}
