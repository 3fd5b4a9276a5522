//! Extended-maximum-likelihood EM over a cohort of histograms.
//!
//! Responsibilities `r_k(c) = P_k(c) Q_k / M(c)` drive the fixed-point updates
//! `Q_k <- sum_c r_k(c) H(c)` and, for trainable components only,
//! `P_k(c) ∝ sum_i r_k,i(c) H_i(c)`. Both are multiplicative, so
//! non-negativity never needs clipping.
//!
//! The log-likelihood is tracked as its deficit from the saturated model
//! (`M = H` cell-wise). The deficit is a sum of small terms near a good fit, so
//! it is free of the large `sum H ln H` constant and its round-off stays well
//! below the monotonicity tolerance.

/// Floor applied to `M` on cells with `H > 0` so logarithms stay finite.
pub const EXPECTATION_FLOOR: f64 = 1e-300;

/// Absolute slack for the per-iteration monotonicity check.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct EmSettings {
    pub max_iter: usize,
    /// Relative change that counts as converged.
    pub tolerance: f64,
    /// Added to the deficit before taking the relative change: the saturated
    /// log-likelihood measures change relative to `ln L` itself, zero measures
    /// it relative to the deficit.
    pub reference: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EmOutcome {
    /// `ln L - ln L_saturated` at the returned parameters (always <= 0).
    pub deficit: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations where the log-likelihood dropped by more than [`MONOTONE_TOLERANCE`].
    pub monotone_violations: usize,
    /// Deficit at every evaluated iterate, when requested.
    pub trace: Vec<f64>,
}

/// Saturated extended log-likelihood `sum (H ln H - H)` of one histogram.
pub fn saturated_loglik(h: &[f64]) -> f64 {
    h.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln() - v).sum()
}

/// Expected counts `M(c) = sum_k P_k(c) q_k`, written into `out`.
pub fn expectation_into(probs: &[Vec<f64>], q: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|m| *m = 0.0);
    for (p, &qk) in probs.iter().zip(q) {
        if qk == 0.0 {
            continue;
        }
        for (m, &pc) in out.iter_mut().zip(p) {
            *m += pc * qk;
        }
    }
}

/// Deficit of one histogram at expectation `m` with quantities summing to `q_sum`.
pub fn deficit(h: &[f64], m: &[f64], q_sum: f64) -> f64 {
    let mut acc = 0.0;
    let mut h_sum = 0.0;
    for (&hc, &mc) in h.iter().zip(m) {
        if hc > 0.0 {
            acc += hc * (mc.max(EXPECTATION_FLOOR) / hc).ln();
            h_sum += hc;
        }
    }
    acc - q_sum + h_sum
}

/// Runs EM in place on `probs` (K x C) and `quantities` (n x K).
pub fn run(
    hists: &[Vec<f64>],
    probs: &mut [Vec<f64>],
    quantities: &mut [Vec<f64>],
    trainable: &[bool],
    settings: EmSettings,
    keep_trace: bool,
) -> EmOutcome {
    let n_cells = probs.first().map_or(0, Vec::len);
    let k = probs.len();
    let mut m = vec![0.0; n_cells];
    let mut ratio = vec![0.0; n_cells];
    let mut acc = vec![vec![0.0; n_cells]; k];
    let mut new_q = vec![vec![0.0; k]; hists.len()];
    let mut out = EmOutcome::default();
    let mut previous: Option<f64> = None;

    for iteration in 0..=settings.max_iter {
        for row in acc.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total_deficit = 0.0;
        for ((h, q), nq) in hists.iter().zip(quantities.iter()).zip(new_q.iter_mut()) {
            expectation_into(probs, q, &mut m);
            total_deficit += deficit(h, &m, q.iter().sum());
            for ((r, &hc), &mc) in ratio.iter_mut().zip(h).zip(&m) {
                *r = if hc > 0.0 { hc / mc.max(EXPECTATION_FLOOR) } else { 0.0 };
            }
            for kk in 0..k {
                let p = &probs[kk];
                let qk = q[kk];
                let mut g = 0.0;
                if trainable[kk] {
                    let a = &mut acc[kk];
                    for c in 0..n_cells {
                        let w = p[c] * ratio[c];
                        g += w;
                        a[c] += w * qk;
                    }
                } else {
                    for c in 0..n_cells {
                        g += p[c] * ratio[c];
                    }
                }
                nq[kk] = qk * g;
            }
        }

        if keep_trace {
            out.trace.push(total_deficit);
        }
        out.deficit = total_deficit;
        out.iterations = iteration;
        if let Some(prev) = previous {
            if total_deficit < prev - MONOTONE_TOLERANCE {
                out.monotone_violations += 1;
            }
            if (total_deficit - prev).abs() <= settings.tolerance * (total_deficit + settings.reference).abs() {
                out.converged = true;
                break;
            }
        }
        if iteration == settings.max_iter {
            break;
        }
        previous = Some(total_deficit);

        for (q, nq) in quantities.iter_mut().zip(&new_q) {
            q.copy_from_slice(nq);
        }
        for (kk, a) in acc.iter().enumerate() {
            if !trainable[kk] {
                continue;
            }
            let sum: f64 = a.iter().sum();
            if sum > 0.0 {
                for (p, &v) in probs[kk].iter_mut().zip(a) {
                    *p = v / sum;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_converges_to_normalised_histogram() {
        let h = vec![vec![5.0, 0.0, 3.0, 12.0]];
        let mut probs = vec![vec![0.25; 4]];
        let mut q = vec![vec![1.0]];
        let out = run(
            &h,
            &mut probs,
            &mut q,
            &[true],
            EmSettings {
                max_iter: 100,
                tolerance: 1e-12,
                reference: 0.0,
            },
            false,
        );
        assert!(out.converged);
        assert_eq!(q[0][0], 20.0);
        for (p, hc) in probs[0].iter().zip(&h[0]) {
            assert!((p - hc / 20.0).abs() < 1e-15);
        }
        assert!(out.deficit.abs() < 1e-12);
    }

    #[test]
    fn frozen_components_untouched() {
        let h = vec![vec![4.0, 1.0, 7.0], vec![2.0, 2.0, 1.0]];
        let frozen = vec![0.2, 0.3, 0.5];
        let mut probs = vec![frozen.clone(), vec![0.6, 0.3, 0.1]];
        let mut q = vec![vec![5.0, 7.0], vec![2.0, 3.0]];
        run(
            &h,
            &mut probs,
            &mut q,
            &[false, true],
            EmSettings {
                max_iter: 500,
                tolerance: 1e-12,
                reference: 0.0,
            },
            false,
        );
        assert_eq!(probs[0], frozen);
        let s: f64 = probs[1].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
