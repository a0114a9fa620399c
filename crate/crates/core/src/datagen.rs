//! Synthetic demonstrations: announced planner policies, simulated logit
//! drivers responding to them, and the recorded decision trees.

use std::collections::BTreeMap;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Dataset, Sample, StrategyPair};
use crate::env::{build_utility_table, Action, DriverTypeParams, Scenario, VehicleState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::game::{follower_response_trajectory, solve_fse, FseOptions, PolicyTrajectory, SolverConfig};
use crate::simplex::Strategy;
use crate::table::UtilityTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Independent flat Dirichlet draw at every `(t, x)`.
    DirichletRandom,
    /// Equilibrium of a noisy utility, mixed with uniform.
    PerturbedDp,
}

/// How the announced planner policies are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyGenSpec {
    pub mode: PolicyMode,
    pub count: usize,
    /// Noise scale of `perturbed_dp`, also its weight on the uniform policy.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for PolicyGenSpec {
    fn default() -> Self {
        Self { mode: PolicyMode::DirichletRandom, count: 8, perturbation: 0.3, seed: 0 }
    }
}

impl PolicyGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParams("policy count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(Error::InvalidParams("perturbation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R) -> Strategy {
    let w: Vec<f64> = (0..NUM_ACTIONS).map(|_| Exp1.sample(rng)).collect();
    Strategy::from_weights(&w)
}

/// Announced planner policies over the scenario horizon.
///
/// `base` is the utility perturbed in `perturbed_dp` mode and ignored otherwise.
pub fn gen_leader_policies(
    spec: &PolicyGenSpec,
    s: &Scenario,
    base: &UtilityTable,
    solver: &SolverConfig,
) -> Result<Vec<PolicyTrajectory>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = s.num_states();
    (0..spec.count)
        .map(|_| match spec.mode {
            PolicyMode::DirichletRandom => {
                let mut p = PolicyTrajectory::empty(s.horizon, n);
                for t in 0..s.horizon {
                    for i in 0..n {
                        p.set(t, i, dirichlet(&mut rng));
                    }
                }
                Ok(p)
            }
            PolicyMode::PerturbedDp => {
                let mut noisy = base.clone();
                if spec.perturbation > 0.0 {
                    let normal = Normal::new(0.0, spec.perturbation).expect("positive scale");
                    noisy = UtilityTable::from_array(base.as_array().mapv(|v| v + normal.sample(&mut rng)));
                }
                let sol = solve_fse(&noisy, &noisy, s, &FseOptions { solver: *solver, ..Default::default() })?;
                let uniform = Strategy::uniform(NUM_ACTIONS);
                Ok(sol.leader.map(|_, _, y| y.mix(&uniform, spec.perturbation)))
            }
        })
        .collect()
}

/// All states with `p = 0` and `v = 0`.
pub fn default_x0_pool(s: &Scenario) -> Vec<VehicleState> {
    (0..s.grid.lanes).map(|y| VehicleState::new(0, y, 0)).collect()
}

/// Rolls `n_samples` decision trees of a simulated driver of type `theta`.
///
/// Each sample draws an announced policy and a root, then expands every
/// state reachable under the policy's support. The driver's action at each
/// decision cell is drawn once from its logit response to the announced
/// policy; elsewhere it keeps. A single path through the tree, with planner
/// actions drawn from the announced strategies, is stored alongside.
pub fn collect_dataset(
    theta: &DriverTypeParams,
    policies: &[PolicyTrajectory],
    n_samples: usize,
    x0_pool: &[VehicleState],
    s: &Scenario,
    seed: u64,
) -> Result<Dataset> {
    if n_samples > 0 && (policies.is_empty() || x0_pool.is_empty()) {
        return Err(Error::InvalidParams("need at least one policy and one initial state".into()));
    }
    let truth = build_utility_table(theta, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut responses: BTreeMap<(usize, VehicleState), PolicyTrajectory> = BTreeMap::new();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let k = rng.random_range(0..policies.len());
        let root = x0_pool[rng.random_range(0..x0_pool.len())];
        if !responses.contains_key(&(k, root)) {
            let r = follower_response_trajectory(&truth, &policies[k], s, &[root], None)?;
            responses.insert((k, root), r.policy);
        }
        let response = &responses[&(k, root)];
        samples.push(roll_tree(theta.type_id, &policies[k], response, root, s, &mut rng)?);
    }
    Ok(Dataset { driver_type: theta.type_id, samples })
}

fn roll_tree<R: Rng + ?Sized>(
    driver_type: u32,
    announced: &PolicyTrajectory,
    response: &PolicyTrajectory,
    root: VehicleState,
    s: &Scenario,
    rng: &mut R,
) -> Result<Sample> {
    let mut pairs = Vec::new();
    let mut frontier = vec![s.encode(root)];
    let mut path = vec![root];
    let mut current = root;
    for t in 0..s.horizon {
        let mut next = Vec::new();
        let mut chosen = BTreeMap::new();
        for &i in &frontier {
            let x = s.decode(i);
            let y_l = announced.get(t, i).ok_or(Error::UncoveredState { t, state: i })?;
            let u_f = if s.sigma.decides(t) {
                let y_f = response.get(t, i).ok_or(Error::UncoveredState { t, state: i })?;
                Action::ALL[y_f.sample(rng)]
            } else {
                Action::Keep
            };
            chosen.insert(i, u_f);
            for a in Action::ALL {
                if y_l[a.index()] > 0.0 {
                    next.push(s.encode(s.transition(x, a, u_f)));
                }
            }
            pairs.push(StrategyPair { t, x, leader: y_l.clone(), follower: u_f });
        }
        let i = s.encode(current);
        let y_l = announced.get(t, i).ok_or(Error::UncoveredState { t, state: i })?;
        let u_l = Action::ALL[y_l.sample(rng)];
        current = s.transition(current, u_l, chosen[&i]);
        path.push(current);
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    Ok(Sample { driver_type, root, pairs, path })
}

/// Seeded disjoint train/test split.
pub fn split_dataset(d: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split_indices(d.len(), n_train, n_test, &mut rng)?;
    let pick = |idx: &[usize]| Dataset { driver_type: d.driver_type, samples: idx.iter().map(|&k| d.samples[k].clone()).collect() };
    Ok((pick(&train), pick(&test)))
}

/// Full generation settings for a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub policies: PolicyGenSpec,
    pub samples_per_type: usize,
    /// Roots to draw from; all `p = 0, v = 0` states when absent.
    pub x0_pool: Option<Vec<VehicleState>>,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { policies: PolicyGenSpec::default(), samples_per_type: 40, x0_pool: None, seed: 0 }
    }
}

/// Generates one dataset per driver type. Policies come from
/// `cfg.policies` with the type's ground truth as the perturbed base.
pub fn generate_population(
    types: &[DriverTypeParams],
    s: &Scenario,
    cfg: &DatagenConfig,
    solver: &SolverConfig,
) -> Result<BTreeMap<u32, Dataset>> {
    let pool = cfg.x0_pool.clone().unwrap_or_else(|| default_x0_pool(s));
    types
        .iter()
        .map(|theta| {
            let offset = u64::from(theta.type_id);
            let spec = PolicyGenSpec { seed: cfg.policies.seed.wrapping_add(offset), ..cfg.policies.clone() };
            let policies = gen_leader_policies(&spec, s, &build_utility_table(theta, s), solver)?;
            let data = collect_dataset(theta, &policies, cfg.samples_per_type, &pool, s, cfg.seed.wrapping_add(offset))?;
            Ok((theta.type_id, data))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_policies_are_valid_and_reproducible() {
        let s = Scenario::default();
        let spec = PolicyGenSpec { count: 1, seed: 9, ..Default::default() };
        let base = UtilityTable::for_scenario(&s);
        let a = gen_leader_policies(&spec, &s, &base, &SolverConfig::default()).unwrap();
        let b = gen_leader_policies(&spec, &s, &base, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].entries().count(), s.horizon * s.num_states());
        assert!(a[0].entries().all(|(_, _, y)| y.is_valid()));
    }

    #[test]
    fn perturbation_endpoints() {
        let s = Scenario::default();
        let base = build_utility_table(&DriverTypeParams::preset(2).unwrap(), &s);
        let solver = SolverConfig::default();
        let exact = PolicyGenSpec { mode: PolicyMode::PerturbedDp, count: 1, perturbation: 0.0, seed: 1 };
        let p = gen_leader_policies(&exact, &s, &base, &solver).unwrap();
        let fse = solve_fse(&base, &base, &s, &FseOptions::default()).unwrap();
        assert_eq!(p[0], fse.leader);

        let flat = PolicyGenSpec { perturbation: 1.0, ..exact };
        let p = gen_leader_policies(&flat, &s, &base, &solver).unwrap();
        assert!(p[0].entries().all(|(_, _, y)| y.total_variation(&Strategy::uniform(6)) < 1e-15));
    }

    #[test]
    fn zero_samples_is_an_empty_valid_dataset() {
        let s = Scenario::default();
        let d = collect_dataset(&DriverTypeParams::preset(1).unwrap(), &[], 0, &[], &s, 0).unwrap();
        assert!(d.is_empty());
        d.validate(&s).unwrap();
    }

    #[test]
    fn collected_trees_satisfy_the_record_invariants() {
        let s = Scenario::default();
        let spec = PolicyGenSpec { count: 3, seed: 4, ..Default::default() };
        let policies = gen_leader_policies(&spec, &s, &UtilityTable::for_scenario(&s), &SolverConfig::default()).unwrap();
        let theta = DriverTypeParams::preset(1).unwrap();
        let d = collect_dataset(&theta, &policies, 15, &default_x0_pool(&s), &s, 11).unwrap();
        assert_eq!(d.len(), 15);
        d.validate(&s).unwrap();
        for sample in &d.samples {
            assert_eq!(sample.path.len(), s.horizon + 1);
            for (t, x) in sample.path.iter().enumerate().take(s.horizon) {
                assert!(sample.pairs.iter().any(|p| p.t == t && p.x == *x));
            }
        }
        let (train, test) = split_dataset(&d, 10, 5, 3).unwrap();
        assert_eq!((train.len(), test.len()), (10, 5));
        let (_, empty) = split_dataset(&d, 10, 0, 3).unwrap();
        assert!(empty.is_empty());
        assert!(split_dataset(&d, 10, 6, 3).is_err());
    }
}
