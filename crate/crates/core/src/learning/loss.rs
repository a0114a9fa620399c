//! Cross-entropy of observed driver actions under the logit response model.
//!
//! For pairs `(yL_i, r_i)` observed at one `(t, x)` the loss of a composite
//! utility `g̃` is
//!
//! ```text
//! L(g̃) = -(1/N) Σ_i log softmax_b(λ Σ_a yL_i(a) g̃(a, b))[r_i]
//! ```
//!
//! Derivatives are taken with respect to `g̃` flattened row-major, so the
//! entry `(a, b)` sits at `a·m_F + b`.

use ndarray::{Array2, ArrayView2};

use crate::dataset::Observation;
use crate::simplex::{log_sum_exp, softmax_into};

fn logits(gtilde: ArrayView2<'_, f64>, leader: &[f64], lambda: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (a, &ya) in leader.iter().enumerate() {
        if ya == 0.0 {
            continue;
        }
        for (b, o) in out.iter_mut().enumerate() {
            *o += ya * gtilde[[a, b]];
        }
    }
    out.iter_mut().for_each(|v| *v *= lambda);
}

/// Loss alone.
pub fn ce_loss(gtilde: ArrayView2<'_, f64>, pairs: &[Observation<'_>], lambda: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut z = vec![0.0; gtilde.ncols()];
    let total: f64 = pairs
        .iter()
        .map(|o| {
            logits(gtilde, o.leader, lambda, &mut z);
            log_sum_exp(&z) - z[o.response]
        })
        .sum();
    total / pairs.len() as f64
}

/// Loss and its gradient. No pairs gives `(0, 0)`.
pub fn ce_loss_and_grad(gtilde: ArrayView2<'_, f64>, pairs: &[Observation<'_>], lambda: f64) -> (f64, Array2<f64>) {
    let (m_l, m_f) = gtilde.dim();
    let mut grad = Array2::zeros((m_l, m_f));
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let n = pairs.len() as f64;
    let mut z = vec![0.0; m_f];
    let mut p = vec![0.0; m_f];
    let mut loss = 0.0;
    for o in pairs {
        logits(gtilde, o.leader, lambda, &mut z);
        loss += log_sum_exp(&z) - z[o.response];
        softmax_into(&z, &mut p);
        p[o.response] -= 1.0;
        for (a, &ya) in o.leader.iter().enumerate() {
            if ya == 0.0 {
                continue;
            }
            let scale = lambda * ya / n;
            for b in 0..m_f {
                grad[[a, b]] += scale * p[b];
            }
        }
    }
    (loss / n, grad)
}

/// Hessian with respect to the row-major flattening of `g̃`.
pub fn ce_hessian(gtilde: ArrayView2<'_, f64>, pairs: &[Observation<'_>], lambda: f64) -> Array2<f64> {
    let (m_l, m_f) = gtilde.dim();
    let dim = m_l * m_f;
    let mut h = Array2::zeros((dim, dim));
    if pairs.is_empty() {
        return h;
    }
    let n = pairs.len() as f64;
    let mut z = vec![0.0; m_f];
    let mut p = vec![0.0; m_f];
    let mut cov = vec![0.0; m_f * m_f];
    for o in pairs {
        logits(gtilde, o.leader, lambda, &mut z);
        softmax_into(&z, &mut p);
        for b in 0..m_f {
            for c in 0..m_f {
                cov[b * m_f + c] = if b == c { p[b] - p[b] * p[c] } else { -p[b] * p[c] };
            }
        }
        for (a, &ya) in o.leader.iter().enumerate() {
            if ya == 0.0 {
                continue;
            }
            for (a2, &ya2) in o.leader.iter().enumerate() {
                if ya2 == 0.0 {
                    continue;
                }
                let scale = lambda * lambda * ya * ya2 / n;
                for b in 0..m_f {
                    for c in 0..m_f {
                        h[[a * m_f + b, a2 * m_f + c]] += scale * cov[b * m_f + c];
                    }
                }
            }
        }
    }
    h
}

/// One gradient step on the training pairs. No pairs leaves `g̃` unchanged.
pub fn inner_adapt(gtilde: ArrayView2<'_, f64>, train: &[Observation<'_>], alpha: f64, lambda: f64) -> Array2<f64> {
    if train.is_empty() {
        return gtilde.to_owned();
    }
    let (_, grad) = ce_loss_and_grad(gtilde, train, lambda);
    &gtilde - &(alpha * &grad)
}
