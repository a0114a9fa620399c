//! One interactive episode with a human in the driver seat.

use serde::{Deserialize, Serialize};
use stackdrive::dataset::{Dataset, StrategyPair};
use stackdrive::env::NUM_ACTIONS;
use stackdrive::planner::{Announcement, DriveMode, Episode, EpisodeLog, Planner, PlannerConfig, ScheduleMode, WhatIf};
use stackdrive::{Action, DriverTypeParams, Scenario, SolverConfig, Strategy, UtilityTable, VehicleState};

use crate::error::{ApiError, ApiResult};

/// Body of `POST /sessions`. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: Option<String>,
    pub utility: Option<String>,
    pub mode: DriveMode,
    /// Defaults to `absolute`, so the human decides only at scheduled steps.
    pub schedule_mode: Option<ScheduleMode>,
    pub x0: Option<VehicleState>,
    /// Seed of the planner's action draws; random when absent.
    pub seed: Option<u64>,
    /// Preset driver type used to score steps, if any.
    pub driver_type: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Awaiting {
    DriverAction,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub leader: Strategy,
    pub predicted_follower: Strategy,
}

/// Full session snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub scenario: String,
    pub utility: String,
    pub mode: DriveMode,
    pub schedule_mode: ScheduleMode,
    pub seed: u64,
    pub driver_type: Option<u32>,
    pub x: VehicleState,
    pub t: usize,
    pub awaiting: Awaiting,
    pub finished: bool,
    pub reached_goal: bool,
    pub pending: Option<PendingView>,
    pub log: EpisodeLog,
    pub history: Vec<StrategyPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub t: usize,
    pub awaiting: Awaiting,
    pub finished: bool,
}

/// Response of `GET /sessions/{id}/assist`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assistance {
    pub t: usize,
    pub x: VehicleState,
    pub leader: Strategy,
    pub predicted_follower: Strategy,
    /// The planner's own drawn action for this step.
    pub leader_action: Action,
    pub what_if: Vec<WhatIf>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub scenario_ref: String,
    pub utility_ref: String,
    pub seed: u64,
    pub driver_type: Option<u32>,
    episode: Episode,
    pending: Option<Announcement>,
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        id: String,
        scenario_ref: String,
        utility_ref: String,
        req: &CreateSession,
        s: &Scenario,
        table: UtilityTable,
        solver: SolverConfig,
        seed: u64,
    ) -> ApiResult<Self> {
        let scoring = match req.driver_type {
            Some(k) => Some(DriverTypeParams::preset(k).ok_or_else(|| ApiError::validation(format!("unknown driver type {k}")))?),
            None => None,
        };
        let x0 = req.x0.unwrap_or(VehicleState::new(0, 0, 0));
        let cfg = PlannerConfig { schedule_mode: req.schedule_mode.unwrap_or(ScheduleMode::Absolute), seed };
        let planner = Planner::new(table, s, req.mode, &cfg, solver)?;
        let episode = Episode::new(planner, x0, scoring)?;
        let mut session =
            Self { id, scenario_ref, utility_ref, seed, driver_type: req.driver_type, episode, pending: None };
        session.advance()?;
        Ok(session)
    }

    pub fn is_finished(&self) -> bool {
        self.episode.is_finished()
    }

    /// Steps through stages where the driver does not decide.
    fn advance(&mut self) -> ApiResult<()> {
        let keep = Strategy::one_hot(NUM_ACTIONS, Action::Keep.index());
        while !self.episode.is_finished() {
            let ann = self.episode.announce()?;
            if ann.driver_decides() {
                self.pending = Some(ann);
                return Ok(());
            }
            self.episode.apply(&ann, keep.clone(), Action::Keep);
        }
        Ok(())
    }

    /// Applies the human's action. `expected_t`, when given, must match the
    /// current step.
    pub fn submit(&mut self, action: Action, expected_t: Option<usize>) -> ApiResult<()> {
        if let Some(t) = expected_t {
            if t != self.episode.t {
                return Err(ApiError::conflict(format!("action for t={t} but the session is at t={}", self.episode.t)));
            }
        }
        let ann = self.pending.take().ok_or_else(|| ApiError::conflict("the session is not awaiting a driver action"))?;
        self.episode.apply(&ann, Strategy::one_hot(NUM_ACTIONS, action.index()), action);
        self.advance()
    }

    pub fn assistance(&self) -> ApiResult<Assistance> {
        let ann = self.pending.as_ref().ok_or_else(ApiError::finished)?;
        Ok(Assistance {
            t: ann.t,
            x: ann.x,
            leader: ann.leader.clone(),
            predicted_follower: ann.predicted_follower.clone(),
            leader_action: ann.leader_action,
            what_if: ann.what_if.clone(),
        })
    }

    /// The human's decisions as a dataset.
    pub fn history(&self) -> Dataset {
        self.episode.log.decisions(self.driver_type.unwrap_or(0))
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary { session_id: self.id.clone(), t: self.episode.t, awaiting: self.awaiting(), finished: self.is_finished() }
    }

    fn awaiting(&self) -> Awaiting {
        if self.pending.is_some() {
            Awaiting::DriverAction
        } else {
            Awaiting::None
        }
    }

    pub fn view(&self) -> SessionView {
        let planner = self.episode.planner();
        SessionView {
            session_id: self.id.clone(),
            scenario: self.scenario_ref.clone(),
            utility: self.utility_ref.clone(),
            mode: planner.mode(),
            schedule_mode: planner.schedule_mode(),
            seed: self.seed,
            driver_type: self.driver_type,
            x: self.episode.x,
            t: self.episode.t,
            awaiting: self.awaiting(),
            finished: self.is_finished(),
            reached_goal: self.episode.log.reached_goal,
            pending: self
                .pending
                .as_ref()
                .map(|a| PendingView { leader: a.leader.clone(), predicted_follower: a.predicted_follower.clone() }),
            log: self.episode.log.clone(),
            history: self.history().samples.into_iter().flat_map(|s| s.pairs).collect(),
        }
    }
}
