//! Feedback Stackelberg equilibria of the finite-horizon shared-control game.
//!
//! The game is solved backwards in time. At a stage where the driver does not
//! decide, the planner maximizes over pure actions with the driver held at
//! `keep`. At a decision stage the driver answers any announced planner
//! strategy with a logit (quantal) response over the composite utility
//! `g + γ·V_next`, and the planner picks the mixed strategy that maximizes its
//! own expected composite utility under that response.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::env::{Action, Scenario, VehicleState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::simplex::{argmax, log_sum_exp, project_simplex, softmax_into, Strategy};
use crate::table::UtilityTable;

/// Stage matrix of composite rewards `g(x,a,b) + γ·V_next(f(x,a,b))`.
pub type CompositeUtility = Array2<f64>;

/// Projected gradient settings of the planner's per-stage problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step: f64,
    pub max_iters: usize,
    /// Stop once an iterate moves less than this (max norm).
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { step: 0.1, max_iters: 500, tol: 1e-8 }
    }
}

/// Values of one time slice, indexed densely by state.
#[derive(Debug, Clone, Copy)]
pub struct StageValues<'a> {
    time: usize,
    values: &'a [Option<f64>],
}

impl<'a> StageValues<'a> {
    pub fn new(time: usize, values: &'a [Option<f64>]) -> Self {
        Self { time, values }
    }

    pub fn get(&self, state: usize) -> Result<f64> {
        self.values
            .get(state)
            .copied()
            .flatten()
            .ok_or(Error::MissingValue { t: self.time, state })
    }
}

/// Per-time value functions, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    stages: Vec<Vec<Option<f64>>>,
}

impl ValueTable {
    /// Table with only the terminal slice filled in.
    pub fn terminal(s: &Scenario, horizon: usize) -> Self {
        let n = s.num_states();
        let mut stages = vec![vec![None; n]; horizon + 1];
        stages[horizon] = (0..n).map(|i| Some(s.terminal_reward(s.decode(i)))).collect();
        Self { stages }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage(&self, t: usize) -> StageValues<'_> {
        StageValues::new(t, &self.stages[t])
    }

    pub fn get(&self, t: usize, state: usize) -> Option<f64> {
        self.stages.get(t)?.get(state).copied().flatten()
    }

    pub fn set(&mut self, t: usize, state: usize, value: f64) {
        self.stages[t][state] = Some(value);
    }

    pub fn clear(&mut self, t: usize) {
        self.stages[t].iter_mut().for_each(|v| *v = None);
    }

    /// `{ "t": { "state": value } }`.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for (t, stage) in self.stages.iter().enumerate() {
            let inner: Map<String, Value> = stage
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i.to_string(), Value::from(v))))
                .collect();
            out.insert(t.to_string(), Value::Object(inner));
        }
        Value::Object(out)
    }
}

/// Time- and state-indexed feedback policy of one agent, `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrajectory {
    stages: Vec<Vec<Option<Strategy>>>,
}

impl PolicyTrajectory {
    pub fn empty(horizon: usize, num_states: usize) -> Self {
        Self { stages: vec![vec![None; num_states]; horizon] }
    }

    /// The same strategy at every `(t, x)`.
    pub fn constant(horizon: usize, num_states: usize, strategy: &Strategy) -> Self {
        Self { stages: vec![vec![Some(strategy.clone()); num_states]; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn num_states(&self) -> usize {
        self.stages.first().map_or(0, Vec::len)
    }

    pub fn get(&self, t: usize, state: usize) -> Option<&Strategy> {
        self.stages.get(t)?.get(state)?.as_ref()
    }

    pub fn set(&mut self, t: usize, state: usize, strategy: Strategy) {
        self.stages[t][state] = Some(strategy);
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &Strategy)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(t, stage)| stage.iter().enumerate().filter_map(move |(i, s)| Some((t, i, s.as_ref()?))))
    }

    /// Applies `f` to every defined entry.
    pub fn map(&self, mut f: impl FnMut(usize, usize, &Strategy) -> Strategy) -> Self {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(t, stage)| {
                stage.iter().enumerate().map(|(i, s)| s.as_ref().map(|s| f(t, i, s))).collect()
            })
            .collect();
        Self { stages }
    }

    /// `{ "t": { "state": [probs] } }`.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for (t, stage) in self.stages.iter().enumerate() {
            let inner: Map<String, Value> = stage
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.as_ref().map(|s| (i.to_string(), Value::from(s.as_slice().to_vec()))))
                .collect();
            out.insert(t.to_string(), Value::Object(inner));
        }
        Value::Object(out)
    }

    pub fn from_json(value: &Value, num_states: usize) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::Parse("policy must be an object".into()))?;
        let mut policy = Self::empty(obj.len(), num_states);
        for (t_key, stage) in obj {
            let t: usize = t_key.parse().map_err(|_| Error::Parse(format!("bad time key `{t_key}`")))?;
            let stage = stage.as_object().ok_or_else(|| Error::Parse("policy stage must be an object".into()))?;
            if t >= policy.horizon() {
                return Err(Error::Parse(format!("time key {t} out of range")));
            }
            for (x_key, probs) in stage {
                let i: usize = x_key.parse().map_err(|_| Error::Parse(format!("bad state key `{x_key}`")))?;
                if i >= num_states {
                    return Err(Error::Parse(format!("state key {i} out of range")));
                }
                policy.set(t, i, serde_json::from_value(probs.clone())?);
            }
        }
        Ok(policy)
    }
}

/// Per-time state subsets (`t = 0..T`) over which a backward pass runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSets(Vec<Vec<usize>>);

impl StateSets {
    pub fn new(mut sets: Vec<Vec<usize>>) -> Self {
        for set in &mut sets {
            set.sort_unstable();
            set.dedup();
        }
        Self(sets)
    }

    pub fn all(s: &Scenario, horizon: usize) -> Self {
        Self(vec![(0..s.num_states()).collect(); horizon])
    }

    /// States reachable from `roots` in exactly `t` steps under any joint action.
    pub fn reachable(roots: &[VehicleState], horizon: usize, s: &Scenario) -> Self {
        let mut sets = Vec::with_capacity(horizon);
        let mut current: Vec<usize> = roots.iter().map(|&x| s.encode(x)).collect();
        current.sort_unstable();
        current.dedup();
        for _ in 0..horizon {
            let next = successors(&current, s);
            sets.push(current);
            current = next;
        }
        Self(sets)
    }

    /// Adds every one-step successor of slice `t` to slice `t + 1`, so a
    /// backward pass over the result never misses a continuation value.
    pub fn closed(&self, s: &Scenario) -> Self {
        let mut sets = self.0.clone();
        for t in 1..sets.len() {
            let mut merged = successors(&sets[t - 1], s);
            merged.extend_from_slice(&sets[t]);
            merged.sort_unstable();
            merged.dedup();
            sets[t] = merged;
        }
        Self(sets)
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn at(&self, t: usize) -> &[usize] {
        &self.0[t]
    }

    pub fn contains(&self, t: usize, state: usize) -> bool {
        self.0[t].binary_search(&state).is_ok()
    }
}

fn successors(states: &[usize], s: &Scenario) -> Vec<usize> {
    let mut out: Vec<usize> = states
        .iter()
        .flat_map(|&i| {
            let x = s.decode(i);
            Action::ALL
                .into_iter()
                .flat_map(move |a| Action::ALL.into_iter().map(move |b| (a, b)))
                .map(move |(a, b)| s.encode(s.transition(x, a, b)))
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Composite utility `g(x,a,b) + γ·V_next(f(x,a,b))` at one state.
pub fn composite_utility(
    g: &UtilityTable,
    next: StageValues<'_>,
    x: VehicleState,
    s: &Scenario,
) -> Result<CompositeUtility> {
    let i = s.encode(x);
    let block = g.block(i);
    let mut out = Array2::zeros((NUM_ACTIONS, NUM_ACTIONS));
    for a in Action::ALL {
        for b in Action::ALL {
            let next_state = s.encode(s.transition(x, a, b));
            out[[a.index(), b.index()]] = block[[a.index(), b.index()]] + s.gamma * next.get(next_state)?;
        }
    }
    Ok(out)
}

/// Continuation part `γ·V_next(f(x,a,b))` alone.
pub fn continuation(next: StageValues<'_>, x: VehicleState, s: &Scenario) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((NUM_ACTIONS, NUM_ACTIONS));
    for a in Action::ALL {
        for b in Action::ALL {
            out[[a.index(), b.index()]] = s.gamma * next.get(s.encode(s.transition(x, a, b)))?;
        }
    }
    Ok(out)
}

/// Expected follower score per column, `Σ_a yL(a)·g̃(a,b)`.
fn column_scores(gtilde: ArrayView2<'_, f64>, leader: &[f64]) -> Vec<f64> {
    let (m_l, m_f) = gtilde.dim();
    let mut scores = vec![0.0; m_f];
    for a in 0..m_l {
        let ya = leader[a];
        if ya != 0.0 {
            for b in 0..m_f {
                scores[b] += ya * gtilde[[a, b]];
            }
        }
    }
    scores
}

/// Logit response of the follower to an announced leader strategy.
pub fn qr_response(gtilde: ArrayView2<'_, f64>, leader: &[f64], lambda: f64) -> Strategy {
    let scores: Vec<f64> = column_scores(gtilde, leader).into_iter().map(|s| lambda * s).collect();
    let mut out = vec![0.0; scores.len()];
    softmax_into(&scores, &mut out);
    Strategy::from_weights(&out)
}

/// Optimal value of the entropy-regularized response problem, `(1/λ)·log Σ_b exp(λ·score_b)`.
pub fn qr_value(gtilde: ArrayView2<'_, f64>, leader: &[f64], lambda: f64) -> f64 {
    let scores: Vec<f64> = column_scores(gtilde, leader).into_iter().map(|s| lambda * s).collect();
    log_sum_exp(&scores) / lambda
}

/// Planner solution at one decision stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSolution {
    pub strategy: Strategy,
    pub value: f64,
    /// The restart that produced `strategy` stopped before `max_iters`.
    pub converged: bool,
}

/// Dense, row-major copy of the two stage matrices plus scratch space.
struct StageProblem {
    m_l: usize,
    m_f: usize,
    leader: Vec<f64>,
    follower: Vec<f64>,
    lambda: f64,
    scores: Vec<f64>,
    response: Vec<f64>,
    expected: Vec<f64>,
}

impl StageProblem {
    fn new(leader: ArrayView2<'_, f64>, follower: ArrayView2<'_, f64>, lambda: f64) -> Self {
        let (m_l, m_f) = leader.dim();
        assert_eq!(follower.dim(), (m_l, m_f), "stage matrices must have equal shape");
        Self {
            m_l,
            m_f,
            leader: leader.iter().copied().collect(),
            follower: follower.iter().copied().collect(),
            lambda,
            scores: vec![0.0; m_f],
            response: vec![0.0; m_f],
            expected: vec![0.0; m_f],
        }
    }

    /// Fills the response and the planner's column values; returns the objective.
    fn evaluate(&mut self, y: &[f64]) -> f64 {
        let (m_l, m_f) = (self.m_l, self.m_f);
        self.scores.iter_mut().for_each(|s| *s = 0.0);
        self.expected.iter_mut().for_each(|s| *s = 0.0);
        for a in 0..m_l {
            let ya = y[a];
            if ya == 0.0 {
                continue;
            }
            let row = a * m_f;
            for b in 0..m_f {
                self.scores[b] += ya * self.follower[row + b];
                self.expected[b] += ya * self.leader[row + b];
            }
        }
        for s in &mut self.scores {
            *s *= self.lambda;
        }
        softmax_into(&self.scores, &mut self.response);
        self.response.iter().zip(&self.expected).map(|(q, w)| q * w).sum()
    }

    /// Gradient of the objective at the point last passed to `evaluate`.
    fn gradient(&self, value: f64, grad: &mut [f64]) {
        let m_f = self.m_f;
        for (a, g) in grad.iter_mut().enumerate() {
            let row = a * m_f;
            let mut direct = 0.0;
            let mut through_response = 0.0;
            for b in 0..m_f {
                direct += self.leader[row + b] * self.response[b];
                through_response += self.follower[row + b] * self.response[b] * (self.expected[b] - value);
            }
            *g = direct + self.lambda * through_response;
        }
    }
}

/// Planner's expected composite utility when the follower answers with its logit response.
pub fn leader_objective(leader: ArrayView2<'_, f64>, follower: ArrayView2<'_, f64>, y: &[f64], lambda: f64) -> f64 {
    StageProblem::new(leader, follower, lambda).evaluate(y)
}

/// Maximizes the planner's stage objective over its simplex.
///
/// Projected gradient ascent is restarted from the uniform point and from
/// every vertex. Every iterate is scored and the best one is returned, so
/// the result is never worse than any pure strategy. A constant objective
/// returns the uniform point.
pub fn leader_stage_opt(
    leader: ArrayView2<'_, f64>,
    follower: ArrayView2<'_, f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> LeaderSolution {
    let mut problem = StageProblem::new(leader, follower, lambda);
    let m = problem.m_l;
    let mut starts = vec![vec![1.0 / m as f64; m]];
    starts.extend((0..m).map(|i| {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        v
    }));

    let mut best_y = starts[0].clone();
    let mut best_value = f64::NEG_INFINITY;
    let mut best_converged = false;
    let mut grad = vec![0.0; m];
    let mut trial = vec![0.0; m];

    for start in starts {
        let mut y = start;
        let mut value = problem.evaluate(&y);
        let mut run_best = (value, y.clone());
        let mut converged = false;
        for _ in 0..cfg.max_iters {
            problem.gradient(value, &mut grad);
            for ((t, &yi), &gi) in trial.iter_mut().zip(&y).zip(&grad) {
                *t = yi + cfg.step * gi;
            }
            let next = project_simplex(&trial);
            let moved = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            y = next;
            value = problem.evaluate(&y);
            if value > run_best.0 {
                run_best = (value, y.clone());
            }
            if moved < cfg.tol {
                converged = true;
                break;
            }
        }
        if run_best.0 > best_value {
            best_value = run_best.0;
            best_y = run_best.1;
            best_converged = converged;
        }
    }

    let total: f64 = best_y.iter().sum();
    best_y.iter_mut().for_each(|v| *v /= total);
    LeaderSolution { strategy: Strategy::from_weights(&best_y), value: best_value, converged: best_converged }
}

/// Pure planner choice at a stage where the driver keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PureStage {
    pub action: Action,
    pub leader_value: f64,
    pub follower_value: f64,
}

/// Stage update with the driver fixed at `keep`; ties go to the lowest action index.
pub fn dp_stage_no_driver(
    leader: &UtilityTable,
    follower: &UtilityTable,
    leader_next: StageValues<'_>,
    follower_next: StageValues<'_>,
    x: VehicleState,
    s: &Scenario,
) -> Result<PureStage> {
    let i = s.encode(x);
    let keep = Action::Keep.index();
    let mut values = [0.0; NUM_ACTIONS];
    for a in Action::ALL {
        let next = s.encode(s.transition(x, a, Action::Keep));
        values[a.index()] = leader.get(i, a.index(), keep) + s.gamma * leader_next.get(next)?;
    }
    let best = Action::ALL[argmax(&values)];
    let next = s.encode(s.transition(x, best, Action::Keep));
    Ok(PureStage {
        action: best,
        leader_value: values[best.index()],
        follower_value: follower.get(i, best.index(), keep) + s.gamma * follower_next.get(next)?,
    })
}

/// Both agents' solution at one decision stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStage {
    pub leader: LeaderSolution,
    pub follower: Strategy,
    pub follower_value: f64,
}

/// Solves a decision stage from the two composite matrices.
pub fn decision_stage(
    leader: ArrayView2<'_, f64>,
    follower: ArrayView2<'_, f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> DecisionStage {
    let sol = leader_stage_opt(leader, follower, lambda, cfg);
    let response = qr_response(follower, sol.strategy.as_slice(), lambda);
    let follower_value = qr_value(follower, sol.strategy.as_slice(), lambda);
    DecisionStage { leader: sol, follower: response, follower_value }
}

/// Options of [`solve_fse`].
#[derive(Debug, Clone, Default)]
pub struct FseOptions {
    /// Overrides the scenario's decision schedule (and thereby the horizon).
    pub schedule: Option<Vec<bool>>,
    /// Restricts each backward step to a state subset; defaults to all states.
    pub states: Option<StateSets>,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone)]
pub struct FseSolution {
    pub leader: PolicyTrajectory,
    pub follower: PolicyTrajectory,
    pub leader_values: ValueTable,
    pub follower_values: ValueTable,
    /// Decision stages whose planner solve hit `max_iters`.
    pub unconverged: usize,
}

enum StageResult {
    Pure(PureStage),
    Decision(DecisionStage),
}

/// Backward dynamic program for the feedback Stackelberg equilibrium.
pub fn solve_fse(leader: &UtilityTable, follower: &UtilityTable, s: &Scenario, opts: &FseOptions) -> Result<FseSolution> {
    leader.check_scenario(s)?;
    follower.check_scenario(s)?;
    let schedule = opts.schedule.clone().unwrap_or_else(|| s.sigma.flags().to_vec());
    let horizon = schedule.len();
    let states = opts.states.clone().unwrap_or_else(|| StateSets::all(s, horizon));
    let n = s.num_states();

    let mut leader_values = ValueTable::terminal(s, horizon);
    let mut follower_values = ValueTable::terminal(s, horizon);
    let mut leader_policy = PolicyTrajectory::empty(horizon, n);
    let mut follower_policy = PolicyTrajectory::empty(horizon, n);
    let mut unconverged = 0;
    let keep = Strategy::one_hot(NUM_ACTIONS, Action::Keep.index());

    for t in (0..horizon).rev() {
        let results: Vec<(usize, StageResult)> = {
            let vl = leader_values.stage(t + 1);
            let vf = follower_values.stage(t + 1);
            states
                .at(t)
                .par_iter()
                .map(|&i| {
                    let x = s.decode(i);
                    let result = if schedule[t] {
                        let a = composite_utility(leader, vl, x, s)?;
                        let b = composite_utility(follower, vf, x, s)?;
                        StageResult::Decision(decision_stage(a.view(), b.view(), s.lambda, &opts.solver))
                    } else {
                        StageResult::Pure(dp_stage_no_driver(leader, follower, vl, vf, x, s)?)
                    };
                    Ok((i, result))
                })
                .collect::<Result<_>>()?
        };
        for (i, result) in results {
            match result {
                StageResult::Pure(p) => {
                    leader_values.set(t, i, p.leader_value);
                    follower_values.set(t, i, p.follower_value);
                    leader_policy.set(t, i, Strategy::one_hot(NUM_ACTIONS, p.action.index()));
                    follower_policy.set(t, i, keep.clone());
                }
                StageResult::Decision(d) => {
                    if !d.leader.converged {
                        unconverged += 1;
                    }
                    leader_values.set(t, i, d.leader.value);
                    follower_values.set(t, i, d.follower_value);
                    leader_policy.set(t, i, d.leader.strategy);
                    follower_policy.set(t, i, d.follower);
                }
            }
        }
    }

    Ok(FseSolution { leader: leader_policy, follower: follower_policy, leader_values, follower_values, unconverged })
}

/// The follower's own dynamic program against a given announced planner policy.
#[derive(Debug, Clone)]
pub struct FollowerResponse {
    pub policy: PolicyTrajectory,
    pub values: ValueTable,
}

/// Follower best (logit) responses to an announced, possibly suboptimal,
/// planner policy over every state reachable from `roots`.
///
/// At non-decision stages the follower keeps and its value backs up the
/// expectation over the announced planner action.
pub fn follower_response_trajectory(
    follower: &UtilityTable,
    announced: &PolicyTrajectory,
    s: &Scenario,
    roots: &[VehicleState],
    schedule: Option<&[bool]>,
) -> Result<FollowerResponse> {
    follower.check_scenario(s)?;
    let schedule = schedule.unwrap_or(s.sigma.flags());
    let horizon = schedule.len();
    let states = StateSets::reachable(roots, horizon, s);
    let n = s.num_states();
    let mut values = ValueTable::terminal(s, horizon);
    let mut policy = PolicyTrajectory::empty(horizon, n);
    let keep = Strategy::one_hot(NUM_ACTIONS, Action::Keep.index());

    for t in (0..horizon).rev() {
        let results: Vec<(usize, Strategy, f64)> = {
            let next = values.stage(t + 1);
            states
                .at(t)
                .par_iter()
                .map(|&i| {
                    let x = s.decode(i);
                    let y_l = announced.get(t, i).ok_or(Error::UncoveredState { t, state: i })?;
                    let gtilde = composite_utility(follower, next, x, s)?;
                    if schedule[t] {
                        let response = qr_response(gtilde.view(), y_l.as_slice(), s.lambda);
                        Ok((i, response, qr_value(gtilde.view(), y_l.as_slice(), s.lambda)))
                    } else {
                        let keep_col = Action::Keep.index();
                        let v = (0..NUM_ACTIONS).map(|a| y_l[a] * gtilde[[a, keep_col]]).sum();
                        Ok((i, keep.clone(), v))
                    }
                })
                .collect::<Result<_>>()?
        };
        for (i, strategy, v) in results {
            policy.set(t, i, strategy);
            values.set(t, i, v);
        }
    }
    Ok(FollowerResponse { policy, values })
}
