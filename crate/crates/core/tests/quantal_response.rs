mod support;

use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stackdrive::datagen::{gen_leader_policies, PolicyGenSpec};
use stackdrive::env::build_utility_table;
use stackdrive::game::{follower_response_trajectory, qr_response, qr_value};
use stackdrive::{DriverTypeParams, Scenario, SolverConfig, UtilityTable, VehicleState};
use support::oracles::*;

#[test]
fn closed_form_matches_numeric_maximization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for lambda in [1.0, 10.0, 100.0] {
        for _ in 0..100 {
            let g = random_matrix(M, M, 1.0, &mut rng);
            let y_l = random_simplex(M, &mut rng);
            let (y, v) = numeric_response(&column_scores(g.view(), &y_l), lambda);
            let closed = qr_response(g.view(), &y_l, lambda);
            assert!(max_abs_diff(closed.as_slice(), &y) < 1e-4, "λ={lambda}");
            assert!((qr_value(g.view(), &y_l, lambda) - v).abs() < 1e-4, "λ={lambda}");
        }
    }
}

#[test]
fn two_by_two_identity_game() {
    let g = array![[1.0, 0.0], [0.0, 1.0]];
    let y = qr_response(g.view(), &[1.0, 0.0], 1.0);
    assert!(max_abs_diff(y.as_slice(), &[0.7311, 0.2689]) < 1e-4);
    let (numeric, _) = numeric_response(&[1.0, 0.0], 1.0);
    assert!(max_abs_diff(y.as_slice(), &numeric) < 1e-4);
}

#[test]
fn follower_dynamic_program_matches_numeric_backward_induction() {
    let s = Scenario::default();
    let truth = build_utility_table(&DriverTypeParams::preset(1).unwrap(), &s);
    let spec = PolicyGenSpec { count: 1, seed: 5, ..Default::default() };
    let announced = gen_leader_policies(&spec, &s, &UtilityTable::for_scenario(&s), &SolverConfig::default())
        .unwrap()
        .remove(0);
    let roots: Vec<VehicleState> = s.states().filter(|x| x.p == 0).collect();
    let lib = follower_response_trajectory(&truth, &announced, &s, &roots, None).unwrap();
    let oracle = numeric_follower_dp(&truth, |t, i| announced.get(t, i).map(|y| y.as_slice().to_vec()), &s);
    let mut checked = 0;
    for (t, i, y) in lib.policy.entries() {
        let expected = oracle[t][i].as_ref().expect("oracle covers every announced state");
        assert!(max_abs_diff(y.as_slice(), expected) < 1e-4, "t={t} state={i}");
        checked += 1;
    }
    assert!(checked > 100);
}

proptest! {
    #[test]
    fn response_is_a_distribution_and_shift_invariant(
        entries in prop::collection::vec(-5.0f64..5.0, 36),
        weights in prop::collection::vec(0.01f64..1.0, 6),
        shift in -10.0f64..10.0,
        lambda in 0.1f64..50.0,
    ) {
        let g = ndarray::Array2::from_shape_vec((6, 6), entries).unwrap();
        let total: f64 = weights.iter().sum();
        let y_l: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let y = qr_response(g.view(), &y_l, lambda);
        prop_assert!(y.is_valid());
        let shifted = g.mapv(|v| v + shift);
        let z = qr_response(shifted.view(), &y_l, lambda);
        prop_assert!(max_abs_diff(y.as_slice(), z.as_slice()) < 1e-9);
        let dv = qr_value(shifted.view(), &y_l, lambda) - qr_value(g.view(), &y_l, lambda);
        prop_assert!((dv - shift).abs() < 1e-9);
    }
}
