//! Receding-horizon shared control.
//!
//! At every real step the planner solves the game over the states reachable
//! within one horizon, announces its feedback policy and draws its own
//! action from the stage-0 strategy. The driver answers with a logit response
//! to the announcement under its own utility. Only stage-0 actions are
//! applied; the next step replans from the new state.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, StrategyPair};
use crate::env::{build_utility_table, stage_cost, Action, DriverTypeParams, Scenario, VehicleState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::game::{follower_response_trajectory, solve_fse, FseOptions, PolicyTrajectory, SolverConfig, StateSets};
use crate::simplex::Strategy;
use crate::table::UtilityTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    #[default]
    Shared,
    /// The planner announces and plays `keep` everywhere.
    DriverOnly,
}

/// Which decision schedule each lookahead uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// The scenario schedule as is, so the driver decides at every real step.
    #[default]
    ReplanRelative,
    /// The schedule rotated by `t mod T`, so the driver decides only at real
    /// times where the scenario schedule is active.
    Absolute,
}

impl ScheduleMode {
    pub fn schedule(self, s: &Scenario, t: usize) -> Vec<bool> {
        match self {
            Self::ReplanRelative => s.sigma.flags().to_vec(),
            Self::Absolute => s.sigma.rotated(t % s.horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub schedule_mode: ScheduleMode,
    /// Seed of the planner's action draws.
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { schedule_mode: ScheduleMode::ReplanRelative, seed: 0 }
    }
}

/// Successor and planner value for one driver action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub action: Action,
    pub next: VehicleState,
    /// `gL(x, uL, b) + γ·V^L_1(next)`, absent when the planner does not plan.
    pub planner_value: Option<f64>,
}

/// What the planner commits to at one real step.
#[derive(Debug, Clone)]
pub struct Announcement {
    pub t: usize,
    pub x: VehicleState,
    pub schedule: Vec<bool>,
    /// Full announced feedback policy over the lookahead.
    pub trajectory: PolicyTrajectory,
    /// Stage-0 strategy at `x`.
    pub leader: Strategy,
    /// The planner's estimate of the driver's stage-0 response. Display only.
    pub predicted_follower: Strategy,
    pub leader_action: Action,
    pub what_if: Vec<WhatIf>,
}

impl Announcement {
    pub fn driver_decides(&self) -> bool {
        self.schedule[0]
    }
}

/// The planner side of an episode.
#[derive(Debug, Clone)]
pub struct Planner {
    table: UtilityTable,
    scenario: Scenario,
    mode: DriveMode,
    schedule_mode: ScheduleMode,
    solver: SolverConfig,
    rng: ChaCha8Rng,
}

impl Planner {
    pub fn new(table: UtilityTable, s: &Scenario, mode: DriveMode, cfg: &PlannerConfig, solver: SolverConfig) -> Result<Self> {
        table.check_scenario(s)?;
        Ok(Self {
            table,
            scenario: s.clone(),
            mode,
            schedule_mode: cfg.schedule_mode,
            solver,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn mode(&self) -> DriveMode {
        self.mode
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        self.schedule_mode
    }

    /// Solves the lookahead game from `x` at real time `t` and draws `uL`.
    pub fn announce(&mut self, t: usize, x: VehicleState) -> Result<Announcement> {
        let s = &self.scenario;
        let schedule = self.schedule_mode.schedule(s, t);
        let i = s.encode(x);
        let keep = Strategy::one_hot(NUM_ACTIONS, Action::Keep.index());
        let (trajectory, predicted, leader_next) = match self.mode {
            DriveMode::Shared => {
                let states = StateSets::reachable(&[x], schedule.len(), s);
                let opts = FseOptions { schedule: Some(schedule.clone()), states: Some(states), solver: self.solver };
                let sol = solve_fse(&self.table, &self.table, s, &opts)?;
                let predicted = sol.follower.get(0, i).cloned().ok_or(Error::UncoveredState { t: 0, state: i })?;
                (sol.leader, predicted, Some(sol.leader_values))
            }
            DriveMode::DriverOnly => {
                let trajectory = PolicyTrajectory::constant(schedule.len(), s.num_states(), &keep);
                let r = follower_response_trajectory(&self.table, &trajectory, s, &[x], Some(&schedule))?;
                let predicted = r.policy.get(0, i).cloned().ok_or(Error::UncoveredState { t: 0, state: i })?;
                (trajectory, predicted, None)
            }
        };
        let leader = trajectory.get(0, i).cloned().ok_or(Error::UncoveredState { t: 0, state: i })?;
        let leader_action = Action::ALL[leader.sample(&mut self.rng)];
        let what_if = Action::ALL
            .iter()
            .map(|&b| {
                let next = s.transition(x, leader_action, b);
                let planner_value = leader_next.as_ref().and_then(|v| {
                    let cont = v.get(1, s.encode(next))?;
                    Some(self.table.get(i, leader_action.index(), b.index()) + s.gamma * cont)
                });
                WhatIf { action: b, next, planner_value }
            })
            .collect();
        Ok(Announcement { t, x, schedule, trajectory, leader, predicted_follower: predicted, leader_action, what_if })
    }
}

/// A simulated logit driver with optional forced actions.
#[derive(Debug, Clone)]
pub struct SimulatedDriver {
    pub params: DriverTypeParams,
    pub lambda: f64,
    /// Forced actions by state, applied whenever the driver decides there.
    pub overrides: Vec<(VehicleState, Action)>,
    truth: UtilityTable,
    rng: ChaCha8Rng,
}

impl SimulatedDriver {
    pub fn new(params: DriverTypeParams, s: &Scenario, seed: u64) -> Self {
        let truth = build_utility_table(&params, s);
        Self { params, lambda: s.lambda, overrides: Vec::new(), truth, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn with_overrides(mut self, overrides: Vec<(VehicleState, Action)>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn utility(&self) -> &UtilityTable {
        &self.truth
    }

    /// Forced action at `x` if one is set, otherwise a draw from `policy`.
    pub fn driver_act(&mut self, x: VehicleState, policy: &Strategy) -> Action {
        if let Some(&(_, a)) = self.overrides.iter().find(|(at, _)| *at == x) {
            return a;
        }
        Action::ALL[policy.sample(&mut self.rng)]
    }

    /// The driver's own stage-0 policy against an announcement, and its action.
    pub fn respond(&mut self, ann: &Announcement, s: &Scenario) -> Result<(Strategy, Action)> {
        if !ann.driver_decides() {
            return Ok((Strategy::one_hot(NUM_ACTIONS, Action::Keep.index()), Action::Keep));
        }
        let mut s = s.clone();
        s.lambda = self.lambda;
        let r = follower_response_trajectory(&self.truth, &ann.trajectory, &s, &[ann.x], Some(&ann.schedule))?;
        let i = s.encode(ann.x);
        let policy = r.policy.get(0, i).cloned().ok_or(Error::UncoveredState { t: 0, state: i })?;
        let action = self.driver_act(ann.x, &policy);
        Ok((policy, action))
    }
}

/// One applied real step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: VehicleState,
    #[serde(rename = "uL")]
    pub leader_action: Action,
    #[serde(rename = "uF")]
    pub follower_action: Action,
    /// Announced stage-0 planner strategy.
    #[serde(rename = "yL")]
    pub leader: Strategy,
    /// The driver's stage-0 policy.
    #[serde(rename = "yF")]
    pub follower: Strategy,
    /// The planner's estimate of `yF`, never applied.
    pub predicted_follower: Strategy,
    pub driver_decided: bool,
    pub next: VehicleState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub reached_goal: bool,
}

impl EpisodeLog {
    /// Human-readable decisions as a dataset of single-pair samples rooted at
    /// the decision state.
    pub fn decisions(&self, driver_type: u32) -> Dataset {
        let samples = self
            .steps
            .iter()
            .filter(|r| r.driver_decided)
            .map(|r| Sample {
                driver_type,
                root: r.x,
                pairs: vec![StrategyPair { t: 0, x: r.x, leader: r.leader.clone(), follower: r.follower_action }],
                path: Vec::new(),
            })
            .collect();
        Dataset { driver_type, samples }
    }
}

/// A running episode: the planner, the current state and the log so far.
#[derive(Debug, Clone)]
pub struct Episode {
    planner: Planner,
    /// Ground truth used to score steps, if known.
    scoring: Option<DriverTypeParams>,
    pub x: VehicleState,
    pub t: usize,
    pub log: EpisodeLog,
}

impl Episode {
    pub fn new(planner: Planner, x0: VehicleState, scoring: Option<DriverTypeParams>) -> Result<Self> {
        if !planner.scenario().in_bounds(x0) {
            return Err(Error::InvalidScenario(format!("initial state {x0} outside grid")));
        }
        let reached_goal = planner.scenario().is_goal(x0);
        Ok(Self { planner, scoring, x: x0, t: 0, log: EpisodeLog { steps: Vec::new(), reached_goal } })
    }

    pub fn scenario(&self) -> &Scenario {
        self.planner.scenario()
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn is_finished(&self) -> bool {
        self.log.reached_goal || self.t >= self.scenario().max_episode_steps
    }

    pub fn announce(&mut self) -> Result<Announcement> {
        self.planner.announce(self.t, self.x)
    }

    /// Applies the planner's drawn action jointly with `uF`.
    pub fn apply(&mut self, ann: &Announcement, follower: Strategy, follower_action: Action) -> &StepRecord {
        let s = self.planner.scenario();
        let next = s.transition(self.x, ann.leader_action, follower_action);
        let reward = self.scoring.as_ref().map(|p| stage_cost(self.x, ann.leader_action, follower_action, p, s));
        let before = self.log.steps.last().and_then(|r| r.accumulated).unwrap_or(0.0);
        let record = StepRecord {
            t: self.t,
            x: self.x,
            leader_action: ann.leader_action,
            follower_action,
            leader: ann.leader.clone(),
            follower,
            predicted_follower: ann.predicted_follower.clone(),
            driver_decided: ann.driver_decides(),
            next,
            reward,
            accumulated: reward.map(|r| before + r),
        };
        self.log.reached_goal = s.is_goal(next);
        self.x = next;
        self.t += 1;
        self.log.steps.push(record);
        self.log.steps.last().expect("just pushed")
    }
}

/// Drives one episode with a simulated driver until the goal or the step limit.
pub fn receding_horizon_drive(
    g_leader: &UtilityTable,
    driver: &mut SimulatedDriver,
    x0: VehicleState,
    s: &Scenario,
    mode: DriveMode,
    cfg: &PlannerConfig,
    solver: &SolverConfig,
) -> Result<EpisodeLog> {
    let planner = Planner::new(g_leader.clone(), s, mode, cfg, *solver)?;
    let mut episode = Episode::new(planner, x0, Some(driver.params.clone()))?;
    while !episode.is_finished() {
        let ann = episode.announce()?;
        let (policy, action) = driver.respond(&ann, s)?;
        episode.apply(&ann, policy, action);
    }
    Ok(episode.log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub reached_goal: bool,
    pub steps: usize,
    pub steps_to_goal: Option<usize>,
    pub final_reward: f64,
    pub reward_curve: Vec<f64>,
}

pub fn evaluate_episode(log: &EpisodeLog) -> EpisodeSummary {
    let reward_curve: Vec<f64> = log.steps.iter().filter_map(|r| r.accumulated).collect();
    EpisodeSummary {
        reached_goal: log.reached_goal,
        steps: log.steps.len(),
        steps_to_goal: log.reached_goal.then_some(log.steps.len()),
        final_reward: reward_curve.last().copied().unwrap_or(0.0),
        reward_curve,
    }
}

/// Episode document `{scenario, mode, driver_type, steps, summary}`.
pub fn episode_json(log: &EpisodeLog, s: &Scenario, mode: DriveMode, driver_type: Option<u32>) -> serde_json::Value {
    serde_json::json!({
        "scenario": s,
        "mode": mode,
        "driver_type": driver_type,
        "steps": log.steps,
        "reached_goal": log.reached_goal,
        "summary": evaluate_episode(log),
    })
}

/// SVG drawing of the grid with the visited states. Velocity is drawn as
/// one chevron per unit.
pub fn render_svg(log: &EpisodeLog, x0: VehicleState, s: &Scenario) -> String {
    const CELL: usize = 40;
    let (cols, rows) = (s.grid.positions, s.grid.lanes);
    let (w, h) = (cols * CELL, rows * CELL);
    // Lane 0 at the bottom.
    let cx = |p: usize| p * CELL + CELL / 2;
    let cy = |y: usize| (rows - 1 - y) * CELL + CELL / 2;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    for p in 0..cols {
        for y in 0..rows {
            let fill = if s.is_obstacle(p, y) {
                "#555"
            } else if p == s.goal.p && y == s.goal.y {
                "#9d9"
            } else {
                "#fff"
            };
            let _ = writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#999"/>"##,
                p * CELL,
                (rows - 1 - y) * CELL
            );
        }
    }
    let states: Vec<VehicleState> = std::iter::once(x0).chain(log.steps.iter().map(|r| r.next)).collect();
    let points: Vec<String> = states.iter().map(|x| format!("{},{}", cx(x.p), cy(x.y))).collect();
    let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#36c" stroke-width="2"/>"##, points.join(" "));
    for x in &states {
        let (x0, y0) = (cx(x.p) as i64, cy(x.y) as i64);
        let _ = writeln!(out, r##"<circle cx="{x0}" cy="{y0}" r="4" fill="#36c"/>"##);
        for k in 0..x.v as i64 {
            let off = x0 - 4 + 7 * k;
            let _ = writeln!(
                out,
                r##"<polyline points="{},{} {},{} {},{}" fill="none" stroke="#c33" stroke-width="2"/>"##,
                off,
                y0 - 12,
                off + 5,
                y0 - 8,
                off,
                y0 - 4
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Parses `"p,y,v=action"`.
pub fn parse_override(text: &str) -> Result<(VehicleState, Action)> {
    let (state, action) = text
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{text}` must look like `p,y,v=action`")))?;
    Ok((state.trim().parse()?, action.trim().parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_start_is_a_zero_step_success() {
        let s = Scenario::default();
        let mut d = SimulatedDriver::new(DriverTypeParams::preset(1).unwrap(), &s, 0);
        let g = UtilityTable::for_scenario(&s);
        let log =
            receding_horizon_drive(&g, &mut d, s.goal, &s, DriveMode::Shared, &PlannerConfig::default(), &SolverConfig::default())
                .unwrap();
        assert!(log.reached_goal && log.steps.is_empty());
        let summary = evaluate_episode(&log);
        assert!(summary.reward_curve.is_empty());
        assert_eq!(summary.final_reward, 0.0);
    }

    #[test]
    fn overrides_win_and_one_hot_policies_are_followed() {
        let s = Scenario::default();
        let x = VehicleState::new(3, 2, 2);
        let mut d = SimulatedDriver::new(DriverTypeParams::preset(3).unwrap(), &s, 0)
            .with_overrides(vec![(x, Action::Decel)]);
        assert_eq!(d.driver_act(x, &Strategy::one_hot(6, 1)), Action::Decel);
        assert_eq!(d.driver_act(VehicleState::new(0, 0, 0), &Strategy::one_hot(6, 4)), Action::Right);
    }

    #[test]
    fn uniform_policy_draws_are_balanced() {
        let s = Scenario::default();
        let mut d = SimulatedDriver::new(DriverTypeParams::preset(1).unwrap(), &s, 17);
        let mut counts = [0usize; 6];
        let u = Strategy::uniform(6);
        for _ in 0..10_000 {
            counts[d.driver_act(VehicleState::new(0, 0, 0), &u).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn episodes_are_consistent_and_reproducible() {
        let s = Scenario::default();
        let theta = DriverTypeParams::preset(2).unwrap();
        let g = build_utility_table(&theta, &s);
        let cfg = PlannerConfig { seed: 3, ..Default::default() };
        let run = || {
            let mut d = SimulatedDriver::new(theta.clone(), &s, 3);
            receding_horizon_drive(&g, &mut d, VehicleState::new(0, 1, 0), &s, DriveMode::Shared, &cfg, &SolverConfig::default())
                .unwrap()
        };
        let log = run();
        assert_eq!(log, run());
        let mut x = VehicleState::new(0, 1, 0);
        let mut acc = 0.0;
        for r in &log.steps {
            assert_eq!(r.x, x);
            assert_eq!(r.next, s.transition(x, r.leader_action, r.follower_action));
            assert!(r.leader.is_valid() && r.follower.is_valid());
            acc += r.reward.unwrap();
            assert!((r.accumulated.unwrap() - acc).abs() < 1e-12);
            x = r.next;
        }
        assert_eq!(log.reached_goal, s.is_goal(x));
    }

    #[test]
    fn absolute_mode_keeps_at_inactive_steps() {
        let s = Scenario::default();
        let theta = DriverTypeParams::preset(1).unwrap();
        let g = build_utility_table(&theta, &s);
        let cfg = PlannerConfig { schedule_mode: ScheduleMode::Absolute, seed: 1 };
        let mut d = SimulatedDriver::new(theta, &s, 1);
        let log =
            receding_horizon_drive(&g, &mut d, VehicleState::new(0, 0, 0), &s, DriveMode::Shared, &cfg, &SolverConfig::default())
                .unwrap();
        for r in &log.steps {
            assert_eq!(r.driver_decided, s.sigma.decides(r.t % s.horizon));
            if !r.driver_decided {
                assert_eq!(r.follower_action, Action::Keep);
            }
        }
    }

    #[test]
    fn driver_only_planner_always_keeps() {
        let s = Scenario::default();
        let theta = DriverTypeParams::preset(5).unwrap();
        let g = UtilityTable::for_scenario(&s);
        let mut d = SimulatedDriver::new(theta, &s, 0);
        let log = receding_horizon_drive(
            &g,
            &mut d,
            VehicleState::new(0, 1, 0),
            &s,
            DriveMode::DriverOnly,
            &PlannerConfig::default(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(log.steps.iter().all(|r| r.leader_action == Action::Keep));
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_override("3,2,2=decel").unwrap(), (VehicleState::new(3, 2, 2), Action::Decel));
        assert!(parse_override("3,2,2").is_err());
        assert!(parse_override("3,2,2=fly").is_err());
    }
}
