use std::collections::BTreeMap;

use stackdrive::datagen::{generate_population, DatagenConfig};
use stackdrive::env::build_utility_table;
use stackdrive::learning::{adapt_driver, run_meta_training, LearnConfig};
use stackdrive::{DriverTypeParams, FseOptions, Scenario, SolverConfig, TypeDistribution, UtilityTable};

fn window_mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn single_type_training_halves_the_loss() {
    let s = Scenario::default();
    let solver = SolverConfig::default();
    let theta = DriverTypeParams::preset(1).unwrap();
    let data = generate_population(std::slice::from_ref(&theta), &s, &DatagenConfig::default(), &solver).unwrap();
    let cfg = LearnConfig::default();
    let out = run_meta_training(&data, &TypeDistribution::single(1), &s, &cfg, &solver).unwrap();
    assert_eq!(out.history.len(), 200);
    let first = out.history[0].overall;
    let last = out.history[199].overall;
    assert!(last < 0.5 * first, "{last} vs {first}");
    let early = window_mean(out.history[..20].iter().map(|r| Some(r.overall)));
    let late = window_mean(out.history[180..].iter().map(|r| Some(r.overall)));
    assert!(late < early);
}

fn policy_distance(a: &UtilityTable, b: &UtilityTable, cells: &[(usize, usize)], s: &Scenario) -> f64 {
    let pa = stackdrive::game::solve_fse(a, a, s, &FseOptions::default()).unwrap();
    let pb = stackdrive::game::solve_fse(b, b, s, &FseOptions::default()).unwrap();
    let total: f64 = cells
        .iter()
        .map(|&(t, i)| pa.follower.get(t, i).unwrap().total_variation(pb.follower.get(t, i).unwrap()))
        .sum();
    total / cells.len() as f64
}

#[test]
fn adaptation_moves_the_follower_policy_towards_the_driver() {
    let s = Scenario::default();
    let solver = SolverConfig::default();
    let data = generate_population(&DriverTypeParams::presets(), &s, &DatagenConfig::default(), &solver).unwrap();
    let cfg = LearnConfig { max_outer_iters: 100, ..Default::default() };
    let meta = run_meta_training(&data, &TypeDistribution::default(), &s, &cfg, &solver).unwrap().table;
    let adapted = adapt_driver(&meta, &data[&3], &s, &cfg, &solver).unwrap();
    let truth = build_utility_table(&DriverTypeParams::preset(3).unwrap(), &s);

    let mut cells: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for sample in &data[&3].samples {
        for p in sample.pairs.iter().filter(|p| s.sigma.decides(p.t)) {
            cells.insert((p.t, s.encode(p.x)), ());
        }
    }
    let cells: Vec<_> = cells.into_keys().collect();
    let before = policy_distance(&meta, &truth, &cells, &s);
    let after = policy_distance(&adapted, &truth, &cells, &s);
    assert!(after < before, "adapted {after} vs meta {before}");
}
