//! Reference computations written independently of the library's solvers.
//!
//! Only the environment (transition, tables) is taken from the crate; every
//! response, value and derivative here is recomputed from its definition.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use stackdrive::env::{Grid, Scenario};
use stackdrive::{Action, DecisionSchedule, UtilityTable, VehicleState};

pub const M: usize = 6;

/// Uniform draw from the simplex of dimension `m`.
pub fn random_simplex<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| -> f64 { Exp1.sample(rng) }).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn column_scores(gtilde: ArrayView2<'_, f64>, leader: &[f64]) -> Vec<f64> {
    (0..gtilde.ncols()).map(|b| (0..gtilde.nrows()).map(|a| leader[a] * gtilde[[a, b]]).sum()).collect()
}

/// `Σ_b y_b s_b + (1/λ)·H(y)`.
pub fn entropy_objective(y: &[f64], scores: &[f64], lambda: f64) -> f64 {
    y.iter()
        .zip(scores)
        .map(|(&p, &s)| p * s - if p > 0.0 { p * p.ln() / lambda } else { 0.0 })
        .sum()
}

/// Maximizes the entropy-regularized response objective by mirror ascent in
/// log coordinates. Returns the maximizer and the attained objective.
pub fn numeric_response(scores: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let m = scores.len();
    let mut log_y = vec![-(m as f64).ln(); m];
    let eta = 0.5 * lambda;
    for _ in 0..400 {
        for b in 0..m {
            log_y[b] += eta * (scores[b] - (log_y[b] + 1.0) / lambda);
        }
        let top = log_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = top + log_y.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        log_y.iter_mut().for_each(|v| *v -= norm);
    }
    let y: Vec<f64> = log_y.iter().map(|v| v.exp()).collect();
    let value = entropy_objective(&y, scores, lambda);
    (y, value)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- cross-entropy loss, from its definition ----

/// `-(1/N) Σ log softmax(λ Σ_a yL(a) g̃(a,·))[r]`.
pub fn ce_reference(gtilde: ArrayView2<'_, f64>, pairs: &[(Vec<f64>, usize)], lambda: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(y, r)| {
            let z: Vec<f64> = column_scores(gtilde, y).into_iter().map(|s| lambda * s).collect();
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            lse - z[*r]
        })
        .sum();
    total / pairs.len() as f64
}

/// Central finite-difference gradient of `f` at `x`, same shape as `x`.
pub fn fd_gradient(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let base = probe[[r, c]];
        probe[[r, c]] = base + h;
        let up = f(&probe);
        probe[[r, c]] = base - h;
        let down = f(&probe);
        probe[[r, c]] = base;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// Central differences of a gradient map; row `k` is `∂grad/∂x_k` flattened.
pub fn fd_jacobian(grad: impl Fn(&Array2<f64>) -> Array2<f64>, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let n = x.len();
    let mut out = Array2::zeros((n, n));
    let mut probe = x.clone();
    for k in 0..n {
        let (r, c) = (k / x.ncols(), k % x.ncols());
        let base = probe[[r, c]];
        probe[[r, c]] = base + h;
        let up = grad(&probe);
        probe[[r, c]] = base - h;
        let down = grad(&probe);
        probe[[r, c]] = base;
        for (j, (u, d)) in up.iter().zip(down.iter()).enumerate() {
            out[[k, j]] = (u - d) / (2.0 * h);
        }
    }
    out
}

/// Random loss instance: a composite matrix and `1..=max_pairs` observations.
pub fn random_ce_instance<R: Rng + ?Sized>(rng: &mut R, max_pairs: usize) -> (Array2<f64>, Vec<(Vec<f64>, usize)>) {
    let g = random_matrix(M, M, 1.0, rng);
    let n = rng.random_range(1..=max_pairs);
    let pairs = (0..n).map(|_| (random_simplex(M, rng), rng.random_range(0..M))).collect();
    (g, pairs)
}

// ---- two-stage game on a micro grid ----

/// Single-lane grid with three positions and two speeds; the driver decides
/// at the first of two stages.
pub fn micro_scenario() -> Scenario {
    Scenario {
        grid: Grid { positions: 3, lanes: 1, velocities: 2 },
        obstacles: vec![],
        goal: VehicleState::new(2, 0, 0),
        goal_reward: 5.0,
        horizon: 2,
        sigma: DecisionSchedule::new(vec![true, false]).unwrap(),
        lambda: 10.0,
        gamma: 1.0,
        max_episode_steps: 10,
    }
}

fn composite(g: &UtilityTable, next: &[f64], x: VehicleState, s: &Scenario) -> Array2<f64> {
    let i = s.encode(x);
    Array2::from_shape_fn((M, M), |(a, b)| {
        let nx = s.transition(x, Action::ALL[a], Action::ALL[b]);
        g.get(i, a, b) + s.gamma * next[s.encode(nx)]
    })
}

/// Best planner value at a stage where the driver keeps: `(leader, follower)` per state.
fn pure_stage(gl: &UtilityTable, gf: &UtilityTable, vl: &[f64], vf: &[f64], s: &Scenario) -> (Vec<f64>, Vec<f64>) {
    let keep = Action::Keep.index();
    let mut out_l = vec![0.0; s.num_states()];
    let mut out_f = vec![0.0; s.num_states()];
    for i in 0..s.num_states() {
        let x = s.decode(i);
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..M {
            let nx = s.encode(s.transition(x, Action::ALL[a], Action::Keep));
            let v = gl.get(i, a, keep) + s.gamma * vl[nx];
            if v > best.0 {
                best = (v, a);
            }
        }
        let nx = s.encode(s.transition(x, Action::ALL[best.1], Action::Keep));
        out_l[i] = best.0;
        out_f[i] = gf.get(i, best.1, keep) + s.gamma * vf[nx];
    }
    (out_l, out_f)
}

/// Exhaustive search of the planner's stage objective over the simplex grid
/// with spacing `1/resolution`, for six actions.
///
/// The follower's logit weights are products of per-action factors, so each
/// grid point costs a handful of multiplications.
pub fn grid_leader_value(leader: &Array2<f64>, follower: &Array2<f64>, lambda: f64, resolution: usize) -> f64 {
    let r = resolution;
    let top = follower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // factor[a][k][b] = exp(λ·(k/r)·(F[a,b] − top))
    let factor: Vec<Vec<[f64; M]>> = (0..M)
        .map(|a| {
            (0..=r)
                .map(|k| {
                    let w = k as f64 / r as f64;
                    let mut row = [0.0; M];
                    for b in 0..M {
                        row[b] = (lambda * w * (follower[[a, b]] - top)).exp();
                    }
                    row
                })
                .collect()
        })
        .collect();
    let lrow = |a: usize, k: usize| -> [f64; M] {
        let w = k as f64 / r as f64;
        let mut row = [0.0; M];
        for b in 0..M {
            row[b] = w * leader[[a, b]];
        }
        row
    };
    let lw: Vec<Vec<[f64; M]>> = (0..M).map(|a| (0..=r).map(|k| lrow(a, k)).collect()).collect();

    let mul = |p: &[f64; M], q: &[f64; M]| -> [f64; M] {
        let mut o = [0.0; M];
        for b in 0..M {
            o[b] = p[b] * q[b];
        }
        o
    };
    let add = |p: &[f64; M], q: &[f64; M]| -> [f64; M] {
        let mut o = [0.0; M];
        for b in 0..M {
            o[b] = p[b] + q[b];
        }
        o
    };

    let mut best = f64::NEG_INFINITY;
    for k0 in 0..=r {
        let (p0, w0) = (factor[0][k0], lw[0][k0]);
        for k1 in 0..=r - k0 {
            let (p1, w1) = (mul(&p0, &factor[1][k1]), add(&w0, &lw[1][k1]));
            for k2 in 0..=r - k0 - k1 {
                let (p2, w2) = (mul(&p1, &factor[2][k2]), add(&w1, &lw[2][k2]));
                for k3 in 0..=r - k0 - k1 - k2 {
                    let (p3, w3) = (mul(&p2, &factor[3][k3]), add(&w2, &lw[3][k3]));
                    let rest = r - k0 - k1 - k2 - k3;
                    for k4 in 0..=rest {
                        let k5 = rest - k4;
                        let (f4, f5) = (&factor[4][k4], &factor[5][k5]);
                        let (l4, l5) = (&lw[4][k4], &lw[5][k5]);
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for b in 0..M {
                            let q = p3[b] * f4[b] * f5[b];
                            num += q * (w3[b] + l4[b] + l5[b]);
                            den += q;
                        }
                        let v = num / den;
                        if v > best {
                            best = v;
                        }
                    }
                }
            }
        }
    }
    best
}

/// Planner values at `t = 0` of the micro scenario's two-stage game, with
/// the decision stage solved by exhaustive grid search.
pub fn micro_grid_values(gl: &UtilityTable, gf: &UtilityTable, s: &Scenario, resolution: usize) -> Vec<f64> {
    assert_eq!(s.sigma.flags(), &[true, false]);
    let terminal: Vec<f64> = (0..s.num_states()).map(|i| s.terminal_reward(s.decode(i))).collect();
    let (vl1, vf1) = pure_stage(gl, gf, &terminal, &terminal, s);
    (0..s.num_states())
        .map(|i| {
            let x = s.decode(i);
            let a = composite(gl, &vl1, x, s);
            let b = composite(gf, &vf1, x, s);
            grid_leader_value(&a, &b, s.lambda, resolution)
        })
        .collect()
}

/// Follower logit responses to an announced policy, by backward induction with
/// the numeric response solver. Returns per `(t, state)` responses for every
/// state (announced strategies must exist wherever they are needed).
pub fn numeric_follower_dp(
    gf: &UtilityTable,
    announced: impl Fn(usize, usize) -> Option<Vec<f64>>,
    s: &Scenario,
) -> Vec<Vec<Option<Vec<f64>>>> {
    let n = s.num_states();
    let horizon = s.horizon;
    let mut next: Vec<Option<f64>> = (0..n).map(|i| Some(s.terminal_reward(s.decode(i)))).collect();
    let mut out = vec![vec![None; n]; horizon];
    for t in (0..horizon).rev() {
        let mut values = vec![None; n];
        for i in 0..n {
            let Some(y_l) = announced(t, i) else { continue };
            let x = s.decode(i);
            let mut g = Array2::zeros((M, M));
            let mut complete = true;
            for a in 0..M {
                for b in 0..M {
                    let nx = s.encode(s.transition(x, Action::ALL[a], Action::ALL[b]));
                    match next[nx] {
                        Some(v) => g[[a, b]] = gf.get(i, a, b) + s.gamma * v,
                        None if y_l[a] > 0.0 && (s.sigma.decides(t) || b == 0) => complete = false,
                        None => {}
                    }
                }
            }
            if !complete {
                continue;
            }
            if s.sigma.decides(t) {
                let scores = column_scores(g.view(), &y_l);
                let (y, v) = numeric_response(&scores, s.lambda);
                values[i] = Some(v);
                out[t][i] = Some(y);
            } else {
                let keep = Action::Keep.index();
                values[i] = Some((0..M).map(|a| y_l[a] * g[[a, keep]]).sum());
                let mut y = vec![0.0; M];
                y[keep] = 1.0;
                out[t][i] = Some(y);
            }
        }
        next = values;
    }
    out
}
