//! Few-shot adaptation of a meta utility to one driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, PairIndex, Sample};
use crate::env::Scenario;
use crate::error::{Error, Result};
use crate::game::{SolverConfig, StateSets};
use crate::learning::loss::ce_loss_and_grad;
use crate::learning::meta::{backward_sweep, CellUpdate, LearnConfig};
use crate::table::UtilityTable;

/// Runs `cfg.adapt_iters` plain gradient sweeps, each on
/// `cfg.adapt_sample_size` samples drawn without replacement.
///
/// Only states that appear in the drawn samples change.
pub fn adapt_driver(
    meta: &UtilityTable,
    data: &Dataset,
    s: &Scenario,
    cfg: &LearnConfig,
    solver: &SolverConfig,
) -> Result<UtilityTable> {
    meta.check_scenario(s)?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, have: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.adapt_sample_size.min(data.len());
    let mut table = meta.clone();
    for _ in 0..cfg.adapt_iters {
        let picked = rand::seq::index::sample(&mut rng, data.len(), k);
        let samples: Vec<&Sample> = picked.iter().map(|j| &data.samples[j]).collect();
        table = adapt_step(&table, &samples, s, cfg.alpha, solver)?;
    }
    Ok(table)
}

/// One adaptation sweep over the given samples.
pub fn adapt_step(
    g: &UtilityTable,
    samples: &[&Sample],
    s: &Scenario,
    alpha: f64,
    solver: &SolverConfig,
) -> Result<UtilityTable> {
    let index = PairIndex::build(samples.iter().copied(), s);
    let need: StateSets = index.state_sets(s.horizon).closed(s);
    let sweep = backward_sweep(g, &need, s, solver, |t, i, gtilde| {
        let obs = index.observations(t, i);
        if obs.is_empty() {
            return None;
        }
        let (loss, grad) = ce_loss_and_grad(gtilde, &obs, s.lambda);
        Some(CellUpdate { gtilde: &gtilde - &(alpha * &grad), pairs: obs.len(), loss })
    })?;
    Ok(sweep.state.table)
}
