//! Per-histogram quantity maximisation with the component PMFs held fixed.
//!
//! The objective `sum_c H ln M - sum_k q_k` is concave in `q`, so a short EM
//! warm start followed by an active-set projected Newton iteration reaches the
//! unique constrained optimum (exact zeros included) to machine precision.

use nalgebra::{DMatrix, DVector};

use super::em::{self, EmSettings, EXPECTATION_FLOOR};

const WARM_START_ITERATIONS: usize = 2_000;
const WARM_START_TOLERANCE: f64 = 1e-11;
const NEWTON_ITERATIONS: usize = 200;
const KKT_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct QuantityFit {
    pub q: Vec<f64>,
    /// Extended log-likelihood `sum H ln M - sum q` (no `ln H!` constant).
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Karush-Kuhn-Tucker conditions satisfied to tolerance.
    pub converged: bool,
}

/// Gradient `dlnL/dq_k = sum_c P_k H / M - 1` and curvature
/// `A_kl = sum_c P_k P_l H / M^2` (the negative Hessian).
fn gradient_and_curvature(probs: &[Vec<f64>], h: &[f64], m: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = probs.len();
    let mut g = vec![-1.0; k];
    let mut a = DMatrix::zeros(k, k);
    for (c, (&hc, &mc)) in h.iter().zip(m).enumerate() {
        if hc <= 0.0 {
            continue;
        }
        let mc = mc.max(EXPECTATION_FLOOR);
        let w1 = hc / mc;
        let w2 = w1 / mc;
        for i in 0..k {
            let pi = probs[i][c];
            if pi == 0.0 {
                continue;
            }
            g[i] += pi * w1;
            for j in 0..=i {
                a[(i, j)] += pi * probs[j][c] * w2;
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    (g, a)
}

fn objective(probs: &[Vec<f64>], h: &[f64], q: &[f64], m: &mut [f64]) -> f64 {
    em::expectation_into(probs, q, m);
    let mut ll = 0.0;
    for (&hc, &mc) in h.iter().zip(m.iter()) {
        if hc > 0.0 {
            if mc <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += hc * mc.ln();
        }
    }
    ll - q.iter().sum::<f64>()
}

/// Cells with counts that no component can explain contribute a constant
/// `-inf` to the objective; they are dropped so the remainder is well posed.
fn explainable(probs: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    h.iter()
        .enumerate()
        .map(|(c, &hc)| if probs.iter().any(|p| p[c] > 0.0) { hc } else { 0.0 })
        .collect()
}

/// Maximises the per-histogram extended likelihood over `q >= 0`.
pub fn maximise(probs: &[Vec<f64>], h: &[f64], init: &[f64]) -> QuantityFit {
    let k = probs.len();
    let h = explainable(probs, h);
    let n_cells = h.len();

    let mut q = vec![init.to_vec()];
    let mut p_work = probs.to_vec();
    let warm = em::run(
        std::slice::from_ref(&h),
        &mut p_work,
        &mut q,
        &vec![false; k],
        EmSettings {
            max_iter: WARM_START_ITERATIONS,
            tolerance: WARM_START_TOLERANCE,
            reference: 0.0,
        },
        false,
    );
    let mut q = q.pop().unwrap_or_default();
    let mut m = vec![0.0; n_cells];
    let mut trial_m = vec![0.0; n_cells];
    let mut f = objective(probs, &h, &q, &mut m);
    let mut converged = false;
    let mut iterations = warm.iterations;

    for _ in 0..NEWTON_ITERATIONS {
        iterations += 1;
        let (g, a) = gradient_and_curvature(probs, &h, &m);
        let free: Vec<usize> = (0..k).filter(|&i| q[i] > 0.0 || g[i] > KKT_TOLERANCE).collect();
        let kkt_ok = (0..k).all(|i| {
            if q[i] > 0.0 {
                g[i].abs() <= KKT_TOLERANCE
            } else {
                g[i] <= KKT_TOLERANCE
            }
        });
        if kkt_ok {
            converged = true;
            break;
        }
        if free.is_empty() {
            break;
        }

        let nf = free.len();
        let a_ff = DMatrix::from_fn(nf, nf, |r, c| a[(free[r], free[c])]);
        let g_f = DVector::from_iterator(nf, free.iter().map(|&i| g[i]));
        let step = match a_ff.clone().cholesky() {
            Some(ch) => ch.solve(&g_f),
            None => {
                // Rank-deficient curvature: regularise along the diagonal.
                let ridge = 1e-10 * a_ff.diagonal().max().max(1e-300);
                match (a_ff + DMatrix::identity(nf, nf) * ridge).cholesky() {
                    Some(ch) => ch.solve(&g_f),
                    None => break,
                }
            }
        };
        let mut direction = vec![0.0; k];
        for (r, &i) in free.iter().enumerate() {
            direction[i] = step[r];
        }

        // Largest feasible step, then backtrack on the concave objective.
        let mut t_max = f64::INFINITY;
        let mut blocking = None;
        for i in 0..k {
            if direction[i] < 0.0 {
                let t = q[i] / -direction[i];
                if t < t_max {
                    t_max = t;
                    blocking = Some(i);
                }
            }
        }
        let mut t = t_max.min(1.0);
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial: Vec<f64> = q.iter().zip(&direction).map(|(qi, di)| (qi + t * di).max(0.0)).collect();
            if t == t_max {
                if let Some(b) = blocking {
                    trial[b] = 0.0;
                }
            }
            let ft = objective(probs, &h, &trial, &mut trial_m);
            if ft >= f - 1e-12 * f.abs().max(1.0) {
                let stalled = trial == q;
                q = trial;
                f = ft;
                std::mem::swap(&mut m, &mut trial_m);
                accepted = !stalled;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable improvement left: accept as converged when
            // the remaining gradient is negligible relative to the scale.
            let g_scale = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
            converged = g_scale < 1e-7;
            break;
        }
    }

    QuantityFit {
        q,
        log_likelihood: f,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_component_drives_others_to_exact_zero() {
        let probs = vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.25, 0.25, 0.5]];
        let h = vec![500.0, 500.0, 0.0, 0.0];
        let fit = maximise(&probs, &h, &[10.0, 10.0]);
        assert!(fit.converged);
        assert!((fit.q[0] - 1000.0).abs() < 1e-9);
        assert_eq!(fit.q[1], 0.0);
    }

    #[test]
    fn interior_optimum_has_zero_gradient() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]];
        let h = vec![40.0, 30.0, 50.0];
        let fit = maximise(&probs, &h, &[1.0, 1.0]);
        assert!(fit.converged);
        let mut m = vec![0.0; 3];
        em::expectation_into(&probs, &fit.q, &mut m);
        let (g, _) = gradient_and_curvature(&probs, &h, &m);
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        assert!((fit.q.iter().sum::<f64>() - 120.0).abs() < 1e-9);
    }

    #[test]
    fn unexplainable_counts_are_ignored() {
        let probs = vec![vec![1.0, 0.0]];
        let fit = maximise(&probs, &[10.0, 4.0], &[1.0]);
        assert!((fit.q[0] - 10.0).abs() < 1e-9);
    }
}
