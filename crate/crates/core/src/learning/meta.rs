//! Meta-learning of a population-level driver utility.
//!
//! Each outer iteration samples a batch of driver types, splits each type's
//! data into train and test samples, and sweeps backwards over the horizon.
//! At a decision stage every state with data gets one second-order MAML step
//! on its composite utility, and the stage utility is read back off by
//! subtracting the continuation. Value functions are rebuilt from the current
//! table on every sweep and never carried between iterations.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Dataset, Observation, PairIndex, Sample};
use crate::env::{Scenario, TypeDistribution, VehicleState};
use crate::error::{Error, Result};
use crate::game::{composite_utility, continuation, decision_stage, dp_stage_no_driver, SolverConfig, StageValues, StateSets, ValueTable};
use crate::learning::loss::{ce_hessian, ce_loss, ce_loss_and_grad, inner_adapt};
use crate::table::UtilityTable;

/// Hyperparameters of meta-training and adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    /// Inner (and adaptation) step size.
    pub alpha: f64,
    /// Meta step size.
    pub beta: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub max_outer_iters: usize,
    /// Adaptation iterations.
    pub adapt_iters: usize,
    /// Samples drawn per adaptation iteration.
    pub adapt_sample_size: usize,
    pub seed: u64,
    /// Drop the Hessian factor of the outer update.
    pub first_order: bool,
    /// States whose loss is reported separately.
    pub tracked_states: Vec<VehicleState>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.04,
            n_train: 10,
            n_test: 5,
            max_outer_iters: 200,
            adapt_iters: 20,
            adapt_sample_size: 10,
            seed: 0,
            first_order: false,
            tracked_states: vec![VehicleState::new(0, 0, 0), VehicleState::new(0, 2, 0)],
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidParams("alpha and beta must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 || self.adapt_sample_size == 0 {
            return Err(Error::InvalidParams("sample sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Train and test pairs of one task at one `(t, x)`.
#[derive(Debug, Clone, Default)]
pub struct MetaTask<'a> {
    pub train: Vec<Observation<'a>>,
    pub test: Vec<Observation<'a>>,
}

/// One outer MAML step on a composite utility.
///
/// A task without train pairs contributes nothing; a task without test
/// pairs is evaluated on its train pairs.
pub fn meta_task_update(
    gtilde: ArrayView2<'_, f64>,
    batch: &[MetaTask<'_>],
    alpha: f64,
    beta: f64,
    lambda: f64,
    first_order: bool,
) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (m_l, m_f) = gtilde.dim();
    let mut total = Array2::<f64>::zeros((m_l, m_f));
    for task in batch {
        if task.train.is_empty() {
            continue;
        }
        let test = if task.test.is_empty() { &task.train } else { &task.test };
        let adapted = inner_adapt(gtilde, &task.train, alpha, lambda);
        let (_, outer) = ce_loss_and_grad(adapted.view(), test, lambda);
        if first_order {
            total += &outer;
        } else {
            let h = ce_hessian(gtilde, &task.train, lambda);
            let flat = Array1::from_iter(outer.iter().copied());
            let corrected = &flat - &(alpha * h.dot(&flat));
            total += &corrected.into_shape_with_order((m_l, m_f)).expect("square block");
        }
    }
    Ok(&gtilde - &(beta / batch.len() as f64 * &total))
}

/// Stage utility implied by a composite utility and the next follower values.
pub fn recover_g_from_composite(
    gtilde: ArrayView2<'_, f64>,
    follower_next: StageValues<'_>,
    x: VehicleState,
    s: &Scenario,
) -> Result<Array2<f64>> {
    Ok(&gtilde - &continuation(follower_next, x, s)?)
}

/// Running weighted mean of per-state blocks estimated at several times.
#[derive(Debug, Default)]
pub struct BlockAverager {
    entries: BTreeMap<usize, (Array2<f64>, f64)>,
}

impl BlockAverager {
    /// Folds in one estimate and returns the updated mean.
    pub fn add(&mut self, state: usize, block: &Array2<f64>, weight: f64) -> Array2<f64> {
        let entry = self.entries.entry(state).or_insert_with(|| (Array2::zeros(block.dim()), 0.0));
        let w = entry.1 + weight;
        entry.0 = (&entry.0 * entry.1 + block * weight) / w;
        entry.1 = w;
        entry.0.clone()
    }

    pub fn weight(&self, state: usize) -> f64 {
        self.entries.get(&state).map_or(0.0, |e| e.1)
    }
}

/// Value functions and update bookkeeping produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub table: UtilityTable,
    pub leader_values: ValueTable,
    pub follower_values: ValueTable,
    /// Number of pairs that moved each state's block in this sweep.
    pub update_counts: Vec<usize>,
}

/// Outcome of the per-cell learning rule inside a sweep.
pub(crate) struct CellUpdate {
    pub gtilde: Array2<f64>,
    pub pairs: usize,
    pub loss: f64,
}

pub(crate) struct Sweep {
    pub state: MetaState,
    /// `(t, state, loss)` of every decision cell that carried data.
    pub cell_losses: Vec<(usize, usize, f64)>,
}

/// Backward pass shared by meta-training and adaptation.
///
/// Non-decision stages back up values with the incoming table `g`. At
/// decision stages `update` maps the composite utility of `g` to a new one;
/// the recovered stage blocks are averaged by pair count and the stage is
/// re-solved with the updated table.
pub(crate) fn backward_sweep<F>(
    g: &UtilityTable,
    need: &StateSets,
    s: &Scenario,
    solver: &SolverConfig,
    update: F,
) -> Result<Sweep>
where
    F: Fn(usize, usize, ArrayView2<'_, f64>) -> Option<CellUpdate> + Sync,
{
    let horizon = s.horizon;
    let mut next = g.clone();
    let mut leader_values = ValueTable::terminal(s, horizon);
    let mut follower_values = ValueTable::terminal(s, horizon);
    let mut averager = BlockAverager::default();
    let mut update_counts = vec![0; s.num_states()];
    let mut cell_losses = Vec::new();

    for t in (0..horizon).rev() {
        if !s.sigma.decides(t) {
            let stage: Vec<(usize, f64, f64)> = {
                let vl = leader_values.stage(t + 1);
                let vf = follower_values.stage(t + 1);
                need.at(t)
                    .par_iter()
                    .map(|&i| {
                        let p = dp_stage_no_driver(g, g, vl, vf, s.decode(i), s)?;
                        Ok((i, p.leader_value, p.follower_value))
                    })
                    .collect::<Result<_>>()?
            };
            for (i, vl, vf) in stage {
                leader_values.set(t, i, vl);
                follower_values.set(t, i, vf);
            }
            continue;
        }

        let updates: Vec<(usize, Array2<f64>, CellUpdate)> = {
            let vf = follower_values.stage(t + 1);
            need.at(t)
                .par_iter()
                .map(|&i| {
                    let cont = continuation(vf, s.decode(i), s)?;
                    let gtilde = &g.block(i) + &cont;
                    Ok(update(t, i, gtilde.view()).map(|u| (i, cont, u)))
                })
                .filter_map(|r: Result<Option<_>>| r.transpose())
                .collect::<Result<_>>()?
        };
        for (i, cont, u) in updates {
            let block = &u.gtilde - &cont;
            let mean = averager.add(i, &block, u.pairs as f64);
            next.set_block(i, &mean);
            update_counts[i] += u.pairs;
            cell_losses.push((t, i, u.loss));
        }

        let stage: Vec<(usize, f64, f64)> = {
            let vl = leader_values.stage(t + 1);
            let vf = follower_values.stage(t + 1);
            let next = &next;
            need.at(t)
                .par_iter()
                .map(|&i| {
                    let x = s.decode(i);
                    let a = composite_utility(next, vl, x, s)?;
                    let b = composite_utility(next, vf, x, s)?;
                    let d = decision_stage(a.view(), b.view(), s.lambda, solver);
                    Ok((i, d.leader.value, d.follower_value))
                })
                .collect::<Result<_>>()?
        };
        for (i, vl, vf) in stage {
            leader_values.set(t, i, vl);
            follower_values.set(t, i, vf);
        }
    }

    cell_losses.sort_by_key(|&(t, i, _)| (t, i));
    Ok(Sweep { state: MetaState { table: next, leader_values, follower_values, update_counts }, cell_losses })
}

/// One sampled task: a driver type with its train and test samples.
#[derive(Debug, Clone)]
pub struct TaskSplit<'a> {
    pub driver_type: u32,
    pub train: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
}

/// Loss of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based iteration number.
    pub iter: usize,
    /// Mean loss over decision cells with data.
    pub overall: f64,
    /// Per tracked state, mean over decision stages with data.
    pub per_state: Vec<Option<f64>>,
}

fn summarize(cells: &[(usize, usize, f64)], tracked: &[usize]) -> (f64, Vec<Option<f64>>) {
    let overall = if cells.is_empty() { 0.0 } else { cells.iter().map(|c| c.2).sum::<f64>() / cells.len() as f64 };
    let per_state = tracked
        .iter()
        .map(|&i| {
            let hits: Vec<f64> = cells.iter().filter(|c| c.1 == i).map(|c| c.2).collect();
            (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
        })
        .collect();
    (overall, per_state)
}

/// One outer iteration from `g` on an already sampled batch.
///
/// Returns the new sweep state and the loss of `g` itself on the batch pairs.
pub fn meta_iteration(
    g: &UtilityTable,
    batch: &[TaskSplit<'_>],
    s: &Scenario,
    cfg: &LearnConfig,
    solver: &SolverConfig,
) -> Result<(MetaState, Vec<(usize, usize, f64)>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let indices: Vec<(PairIndex<'_>, PairIndex<'_>)> = batch
        .iter()
        .map(|task| (PairIndex::build(task.train.iter().copied(), s), PairIndex::build(task.test.iter().copied(), s)))
        .collect();

    let mut sets = vec![Vec::new(); s.horizon];
    for (train, test) in &indices {
        for (t, i) in train.cells().chain(test.cells()) {
            sets[t].push(i);
        }
    }
    let need = StateSets::new(sets).closed(s);

    let sweep = backward_sweep(g, &need, s, solver, |t, i, gtilde| {
        let tasks: Vec<MetaTask<'_>> = indices
            .iter()
            .map(|(train, test)| MetaTask { train: train.observations(t, i), test: test.observations(t, i) })
            .collect();
        let all: Vec<Observation<'_>> = tasks.iter().flat_map(|m| m.train.iter().chain(&m.test).copied()).collect();
        if all.is_empty() {
            return None;
        }
        let loss = ce_loss(gtilde, &all, s.lambda);
        let updated = meta_task_update(gtilde, &tasks, cfg.alpha, cfg.beta, s.lambda, cfg.first_order).ok()?;
        Some(CellUpdate { gtilde: updated, pairs: all.len(), loss })
    })?;
    Ok((sweep.state, sweep.cell_losses))
}

/// Output of [`run_meta_training`].
#[derive(Debug, Clone)]
pub struct MetaTraining {
    pub table: UtilityTable,
    pub history: Vec<LossRecord>,
}

/// Samples a batch of `|types|` tasks i.i.d. from `mu` and splits each.
pub fn sample_batch<'a>(
    datasets: &'a BTreeMap<u32, Dataset>,
    mu: &TypeDistribution,
    cfg: &LearnConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskSplit<'a>>> {
    let pick = WeightedIndex::new(&mu.weights).map_err(|e| Error::InvalidParams(format!("type weights: {e}")))?;
    (0..mu.types.len())
        .map(|_| {
            let theta = mu.types[pick.sample(rng)];
            let data = datasets.get(&theta).ok_or(Error::MissingDataset(theta))?;
            let (train, test) = split_indices(data.len(), cfg.n_train, cfg.n_test, rng)?;
            Ok(TaskSplit {
                driver_type: theta,
                train: train.iter().map(|&k| &data.samples[k]).collect(),
                test: test.iter().map(|&k| &data.samples[k]).collect(),
            })
        })
        .collect()
}

/// Meta-trains from the all-zero table for `cfg.max_outer_iters` iterations.
pub fn run_meta_training(
    datasets: &BTreeMap<u32, Dataset>,
    mu: &TypeDistribution,
    s: &Scenario,
    cfg: &LearnConfig,
    solver: &SolverConfig,
) -> Result<MetaTraining> {
    run_meta_training_from(UtilityTable::for_scenario(s), datasets, mu, s, cfg, solver)
}

/// Meta-training from a given initial table.
pub fn run_meta_training_from(
    init: UtilityTable,
    datasets: &BTreeMap<u32, Dataset>,
    mu: &TypeDistribution,
    s: &Scenario,
    cfg: &LearnConfig,
    solver: &SolverConfig,
) -> Result<MetaTraining> {
    s.validate()?;
    mu.validate()?;
    cfg.validate()?;
    init.check_scenario(s)?;
    let tracked: Vec<usize> = cfg.tracked_states.iter().map(|&x| s.encode(x)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = init;
    let mut history = Vec::with_capacity(cfg.max_outer_iters);
    for k in 0..cfg.max_outer_iters {
        let batch = sample_batch(datasets, mu, cfg, &mut rng)?;
        let (state, cells) = meta_iteration(&table, &batch, s, cfg, solver)?;
        let (overall, per_state) = summarize(&cells, &tracked);
        history.push(LossRecord { iter: k + 1, overall, per_state });
        table = state.table;
    }
    Ok(MetaTraining { table, history })
}

/// Data-averaged loss of a utility estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedLoss {
    pub overall: f64,
    pub per_state: Vec<Option<f64>>,
}

/// Mean cross-entropy of `g` over every decision cell present in the data.
///
/// Composite utilities come from the equilibrium of `g` against itself over
/// the data's states and their successors. Data without decision cells
/// scores 0.
pub fn normalized_loss<'a, I>(
    g: &UtilityTable,
    datasets: I,
    s: &Scenario,
    tracked_states: &[VehicleState],
    solver: &SolverConfig,
) -> Result<NormalizedLoss>
where
    I: IntoIterator<Item = &'a Dataset>,
{
    let index = PairIndex::build(datasets.into_iter().flat_map(|d| &d.samples), s);
    let tracked: Vec<usize> = tracked_states.iter().map(|&x| s.encode(x)).collect();
    let decision_cells: Vec<(usize, usize)> = index.cells().filter(|&(t, _)| s.sigma.decides(t)).collect();
    if decision_cells.is_empty() {
        return Ok(NormalizedLoss { overall: 0.0, per_state: vec![None; tracked.len()] });
    }
    let need = index.state_sets(s.horizon).closed(s);
    let opts = crate::game::FseOptions { states: Some(need), solver: *solver, ..Default::default() };
    let sol = crate::game::solve_fse(g, g, s, &opts)?;
    let cells: Vec<(usize, usize, f64)> = decision_cells
        .par_iter()
        .map(|&(t, i)| {
            let gtilde = composite_utility(g, sol.follower_values.stage(t + 1), s.decode(i), s)?;
            Ok((t, i, ce_loss(gtilde.view(), &index.observations(t, i), s.lambda)))
        })
        .collect::<Result<_>>()?;
    let (overall, per_state) = summarize(&cells, &tracked);
    Ok(NormalizedLoss { overall, per_state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StrategyPair;
    use crate::env::Action;
    use crate::simplex::Strategy;

    #[test]
    fn zero_beta_and_empty_tasks_are_identities() {
        let g = Array2::from_shape_fn((6, 6), |(a, b)| (a + 2 * b) as f64 * 0.1);
        let y = Strategy::uniform(6);
        let obs = vec![Observation { leader: y.as_slice(), response: 2 }];
        let task = MetaTask { train: obs.clone(), test: obs };
        assert_eq!(meta_task_update(g.view(), &[task], 0.01, 0.0, 10.0, false).unwrap(), g);
        let empty = MetaTask::default();
        assert_eq!(meta_task_update(g.view(), &[empty.clone(), empty], 0.01, 0.04, 10.0, false).unwrap(), g);
        assert!(matches!(meta_task_update(g.view(), &[], 0.01, 0.04, 10.0, false), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_alpha_is_averaged_gradient_descent() {
        let g = Array2::from_shape_fn((6, 6), |(a, b)| ((a * 5 + b) % 7) as f64 * 0.05);
        let y1 = Strategy::from_weights(&[3.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let y2 = Strategy::one_hot(6, 4);
        let t1 = MetaTask {
            train: vec![Observation { leader: y1.as_slice(), response: 1 }],
            test: vec![Observation { leader: y2.as_slice(), response: 0 }],
        };
        let t2 = MetaTask { train: vec![Observation { leader: y2.as_slice(), response: 3 }], test: vec![] };
        let out = meta_task_update(g.view(), &[t1.clone(), t2.clone()], 0.0, 0.5, 10.0, false).unwrap();
        let (_, g1) = ce_loss_and_grad(g.view(), &t1.test, 10.0);
        let (_, g2) = ce_loss_and_grad(g.view(), &t2.train, 10.0);
        let expected = &g - &(0.25 * (&g1 + &g2));
        assert!(out.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn averager_weights_by_pair_count() {
        let mut avg = BlockAverager::default();
        let a = Array2::from_elem((6, 6), 1.0);
        let b = Array2::from_elem((6, 6), 4.0);
        avg.add(7, &a, 10.0);
        let mean = avg.add(7, &b, 5.0);
        assert!(mean.iter().all(|&v| (v - 2.0).abs() < 1e-15));
        assert_eq!(avg.weight(7), 15.0);
    }

    #[test]
    fn recovery_round_trips_and_is_identity_on_zero_values() {
        let s = Scenario::default();
        let g = crate::env::build_utility_table(&crate::env::DriverTypeParams::preset(5).unwrap(), &s);
        let x = VehicleState::new(3, 1, 2);
        let zeros = vec![Some(0.0); s.num_states()];
        let block = recover_g_from_composite(g.block(s.encode(x)), StageValues::new(1, &zeros), x, &s).unwrap();
        assert_eq!(block, g.block(s.encode(x)));
        let vals: Vec<_> = (0..s.num_states()).map(|i| Some(i as f64 * 0.01 - 0.3)).collect();
        let next = StageValues::new(1, &vals);
        let gt = composite_utility(&g, next, x, &s).unwrap();
        let back = recover_g_from_composite(gt.view(), next, x, &s).unwrap();
        assert!(back.iter().zip(g.block(s.encode(x))).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    fn tiny_dataset(theta: u32) -> Dataset {
        let mk = |r: usize| Sample {
            driver_type: theta,
            root: [0, 1, 0].into(),
            pairs: vec![StrategyPair {
                t: 0,
                x: [0, 1, 0].into(),
                leader: Strategy::one_hot(6, 0),
                follower: Action::from_index(r).unwrap(),
            }],
            path: vec![],
        };
        Dataset { driver_type: theta, samples: (0..4).map(|k| mk(if k % 2 == 0 { 1 } else { 3 })).collect() }
    }

    #[test]
    fn zero_iterations_return_the_zero_table() {
        let s = Scenario::default();
        let data = BTreeMap::from([(1, tiny_dataset(1))]);
        let cfg = LearnConfig { max_outer_iters: 0, ..Default::default() };
        let out = run_meta_training(&data, &TypeDistribution::single(1), &s, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(out.table, UtilityTable::for_scenario(&s));
        assert!(out.history.is_empty());
    }

    #[test]
    fn missing_dataset_is_an_error() {
        let s = Scenario::default();
        let data = BTreeMap::from([(1, tiny_dataset(1))]);
        let cfg = LearnConfig { n_train: 2, n_test: 1, max_outer_iters: 1, ..Default::default() };
        let mu = TypeDistribution::single(2);
        let err = run_meta_training(&data, &mu, &s, &cfg, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingDataset(2)));
    }

    #[test]
    fn training_is_deterministic_and_only_touches_data_states() {
        let s = Scenario::default();
        let data = BTreeMap::from([(1, tiny_dataset(1)), (2, tiny_dataset(2))]);
        let mu = TypeDistribution::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let cfg = LearnConfig { n_train: 2, n_test: 1, max_outer_iters: 3, ..Default::default() };
        let a = run_meta_training(&data, &mu, &s, &cfg, &SolverConfig::default()).unwrap();
        let b = run_meta_training(&data, &mu, &s, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.history, b.history);
        let touched = s.encode([0, 1, 0].into());
        for i in 0..s.num_states() {
            let nonzero = a.table.block(i).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, i == touched, "state {i}");
        }
    }

    #[test]
    fn sweep_state_depends_only_on_the_table() {
        let s = Scenario::default();
        let data = tiny_dataset(1);
        let batch = [TaskSplit { driver_type: 1, train: data.samples.iter().take(2).collect(), test: vec![] }];
        let g = UtilityTable::from_array(ndarray::Array3::from_elem((90, 6, 6), -0.5));
        let cfg = LearnConfig::default();
        let (first, l1) = meta_iteration(&g, &batch, &s, &cfg, &SolverConfig::default()).unwrap();
        let (second, l2) = meta_iteration(&g, &batch, &s, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(first.table, second.table);
        assert_eq!(first.follower_values, second.follower_values);
        assert_eq!(l1, l2);
    }

    #[test]
    fn normalized_loss_of_zero_table_is_log_six_per_cell() {
        let mut s = Scenario::default();
        s.goal_reward = 0.0;
        let g = UtilityTable::for_scenario(&s);
        let loss = normalized_loss(&g, [&tiny_dataset(1)], &s, &[VehicleState::new(0, 1, 0)], &SolverConfig::default())
            .unwrap();
        assert!((loss.overall - 6f64.ln()).abs() < 1e-12);
        assert!((loss.per_state[0].unwrap() - 6f64.ln()).abs() < 1e-12);
    }
}
