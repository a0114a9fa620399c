mod support;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stackdrive::dataset::Observation;
use stackdrive::game::qr_response;
use stackdrive::learning::{ce_hessian, ce_loss, ce_loss_and_grad, inner_adapt, meta_task_update, MetaTask};
use support::oracles::*;

fn observations(pairs: &[(Vec<f64>, usize)]) -> Vec<Observation<'_>> {
    pairs.iter().map(|(y, r)| Observation { leader: y, response: *r }).collect()
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn loss_matches_its_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (g, pairs) = random_ce_instance(&mut rng, 6);
        let lib = ce_loss(g.view(), &observations(&pairs), 10.0);
        assert!((lib - ce_reference(g.view(), &pairs, 10.0)).abs() < 1e-10);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..120 {
        let lambda = [1.0, 5.0, 10.0][k % 3];
        let (g, pairs) = random_ce_instance(&mut rng, 8);
        let obs = observations(&pairs);
        let (loss, grad) = ce_loss_and_grad(g.view(), &obs, lambda);
        assert!((loss - ce_loss(g.view(), &obs, lambda)).abs() < 1e-12);
        let fd = fd_gradient(|x| ce_reference(x.view(), &pairs, lambda), &g, 1e-5);
        let rel = max_abs(&(&grad - &fd)) / max_abs(&fd).max(1e-12);
        assert!(rel < 1e-5, "instance {k}: relative error {rel:e}");
    }
}

#[test]
fn hessian_matches_differences_of_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..120 {
        let lambda = [1.0, 5.0, 10.0][k % 3];
        let (g, pairs) = random_ce_instance(&mut rng, 8);
        let obs = observations(&pairs);
        let h = ce_hessian(g.view(), &obs, lambda);
        let fd = fd_jacobian(|x| ce_loss_and_grad(x.view(), &obs, lambda).1, &g, 1e-5);
        let err = max_abs(&(&h - &fd));
        assert!(err < 1e-4, "instance {k}: abs error {err:e}");
    }
}

#[test]
fn hessian_at_zero_is_the_softmax_covariance() {
    let y = vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1];
    let pairs = vec![(y.clone(), 2)];
    let lambda = 3.0;
    let h = ce_hessian(Array2::zeros((M, M)).view(), &observations(&pairs), lambda);
    let p = 1.0 / M as f64;
    for a in 0..M {
        for b in 0..M {
            for c in 0..M {
                for d in 0..M {
                    let cov = if b == d { p - p * p } else { -p * p };
                    let expected = lambda * lambda * y[a] * y[c] * cov;
                    assert!((h[[a * M + b, c * M + d]] - expected).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn inner_step_from_zero_is_minus_alpha_times_the_gradient() {
    let pairs = vec![(vec![0.3, 0.1, 0.1, 0.2, 0.2, 0.1], 4)];
    let zero = Array2::zeros((M, M));
    let fd = fd_gradient(|x| ce_reference(x.view(), &pairs, 10.0), &zero, 1e-5);
    let adapted = inner_adapt(zero.view(), &observations(&pairs), 0.01, 10.0);
    assert!(max_abs(&(&adapted + &(0.01 * &fd))) < 1e-8);
}

#[test]
fn meta_update_matches_differences_of_the_composed_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (alpha, beta, lambda) = (0.01, 0.04, 10.0);
    for _ in 0..5 {
        let g = random_matrix(M, M, 0.3, &mut rng);
        let train = vec![(random_simplex(M, &mut rng), 1)];
        let test = vec![(random_simplex(M, &mut rng), 3)];
        let inner = |x: &Array2<f64>| {
            let grad = fd_gradient(|z| ce_reference(z.view(), &train, lambda), x, 1e-6);
            x - &(alpha * &grad)
        };
        let composed = |x: &Array2<f64>| ce_reference(inner(x).view(), &test, lambda);
        let expected = &g - &(beta * &fd_gradient(composed, &g, 1e-4));
        let task = MetaTask { train: observations(&train), test: observations(&test) };
        let got = meta_task_update(g.view(), &[task], alpha, beta, lambda, false).unwrap();
        let err = max_abs(&(&got - &expected));
        assert!(err < 1e-6, "error {err:e}");
    }
}

#[test]
fn loss_of_the_generating_utility_sits_at_the_entropy_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lambda = 2.0;
    let g = random_matrix(M, M, 1.0, &mut rng);
    let mut pairs = Vec::new();
    let mut entropy = 0.0;
    for _ in 0..1000 {
        let y = random_simplex(M, &mut rng);
        let q = qr_response(g.view(), &y, lambda);
        entropy -= q.as_slice().iter().map(|p| p * p.ln()).sum::<f64>();
        let r = q.sample(&mut rng);
        pairs.push((y, r));
    }
    entropy /= 1000.0;
    let loss = ce_loss(g.view(), &observations(&pairs), lambda);
    assert!(loss > 0.0);
    assert!((loss - entropy).abs() < 0.1, "loss {loss} vs entropy {entropy}");
}
