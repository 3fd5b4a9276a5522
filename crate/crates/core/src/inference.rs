//! Error propagation from Poisson counts to quantities, and response statistics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::Histogram2D;
use crate::lpm::{self, FitDiagnostics, LpmModel, QuantityVector};
use crate::selection::{self, GoodnessOfFit, ParameterCount};
use crate::stats;

/// Relative eigenvalue below which the curvature matrix is treated as singular.
const SINGULAR_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityCovariance {
    pub matrix: Vec<Vec<f64>>,
    pub scaled_by_chi2: bool,
    pub chi2_used: f64,
    /// Components held at zero by the non-negativity constraint (variance reported as 0).
    pub constrained: Vec<bool>,
    /// Set when the curvature matrix was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

impl QuantityCovariance {
    pub fn variance(&self, k: usize) -> f64 {
        self.matrix[k][k]
    }

    /// `g^T C g`.
    pub fn quadratic_form(&self, g: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                acc += g[i] * c * g[j];
            }
        }
        acc
    }
}

/// Curvature `A_kl = sum_c P_k P_l H / M^2` and noise term
/// `B_kl = sum_c P_k P_l var(H) / M^2` over the free components, with `var(H) = H`.
fn curvature(probs: &[Vec<f64>], h: &[f64], m: &[f64], free: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = free.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for c in 0..h.len() {
        if h[c] <= 0.0 || m[c] <= 0.0 {
            continue;
        }
        let wa = h[c] / (m[c] * m[c]);
        let wb = h[c] / (m[c] * m[c]);
        for (r, &i) in free.iter().enumerate() {
            let pi = probs[i][c];
            if pi == 0.0 {
                continue;
            }
            for (s, &j) in free.iter().enumerate().take(r + 1) {
                let pp = pi * probs[j][c];
                a[(r, s)] += pp * wa;
                b[(r, s)] += pp * wb;
            }
        }
    }
    for r in 0..n {
        for s in 0..r {
            a[(s, r)] = a[(r, s)];
            b[(s, r)] = b[(r, s)];
        }
    }
    (a, b)
}

/// Inverse of a symmetric positive semi-definite matrix; the second value is
/// true when it was singular and the Moore-Penrose pseudo-inverse was used.
fn spd_inverse(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let eig = SymmetricEigen::new(a.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let cutoff = SINGULAR_RELATIVE * largest;
    let singular = largest == 0.0 || eig.eigenvalues.iter().any(|&v| v <= cutoff);
    if !singular {
        if let Some(ch) = a.clone().cholesky() {
            return (ch.inverse(), false);
        }
    }
    let mut inv = DMatrix::zeros(n, n);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(idx);
            inv += (v * v.transpose()) / lambda;
        }
    }
    (inv, true)
}

/// Covariance of fitted quantities, `C = chi2 A^-1 B A^-1`, from the
/// implicit-function derivative of the stationarity conditions with respect to
/// the counts. Components at an active zero bound are dropped before
/// inversion and get zero variance. With `chi2 = None` no scaling is applied.
pub fn quantity_covariance(model: &LpmModel, h: &Histogram2D, q: &QuantityVector, chi2: Option<&GoodnessOfFit>) -> Result<QuantityCovariance> {
    model.check_binning(h)?;
    let m = lpm::model_expectation(model, q)?;
    let cells = h.cells();
    let probs = model.probs();
    let k = model.n_components();
    let free: Vec<usize> = (0..k).filter(|&i| q.0[i] > 0.0).collect();
    let (a, b) = curvature(&probs, &cells, &m, &free);
    let (a_inv, pseudo) = spd_inverse(&a);
    let core = &a_inv * b * &a_inv;
    let scale = chi2.map_or(1.0, |g| g.chi2_per_dof);

    let mut matrix = vec![vec![0.0; k]; k];
    for (r, &i) in free.iter().enumerate() {
        for (s, &j) in free.iter().enumerate() {
            // Symmetrise away round-off from the triple product.
            matrix[i][j] = scale * 0.5 * (core[(r, s)] + core[(s, r)]);
        }
    }
    for (i, row) in matrix.iter().enumerate() {
        if row[i] < 0.0 || !row[i].is_finite() {
            return Err(Error::InternalConsistency(format!(
                "covariance diagonal {i} is {} for histogram {}",
                row[i], h.tumor_id
            )));
        }
    }
    Ok(QuantityCovariance {
        matrix,
        scaled_by_chi2: chi2.is_some(),
        chi2_used: scale,
        constrained: (0..k).map(|i| q.0[i] <= 0.0).collect(),
        pseudo_inverse: pseudo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseResult {
    pub tumor_id: String,
    pub q_treatment_total: f64,
    pub sigma_treatment: f64,
    pub effect_fraction: f64,
    pub effect_fraction_sigma: f64,
    pub z: f64,
    pub p_two_tailed: f64,
}

/// Treatment volume, its Z-score and the responding fraction of the tumor.
pub fn response_result(model: &LpmModel, h: &Histogram2D, q: &QuantityVector, cov: &QuantityCovariance) -> Result<ResponseResult> {
    if model.n_treatment == 0 {
        return Err(Error::Precondition("response needs at least one treatment component".into()));
    }
    if q.len() != model.n_components() || cov.matrix.len() != model.n_components() {
        return Err(Error::ShapeMismatch("quantities or covariance do not match the model".into()));
    }
    let treat = model.treatment_indices();
    let t: f64 = q.0[treat.clone()].iter().sum();
    let s = q.total();
    let indicator: Vec<f64> = (0..q.len()).map(|i| if treat.contains(&i) { 1.0 } else { 0.0 }).collect();
    let sigma = cov.quadratic_form(&indicator).max(0.0).sqrt();

    let z = if t == 0.0 {
        0.0
    } else if sigma > 0.0 {
        t / sigma
    } else {
        return Err(Error::DegenerateVariance(format!(
            "treatment quantity {t} of {} has zero propagated error",
            h.tumor_id
        )));
    };

    let (fraction, fraction_sigma) = if s > 0.0 {
        // Delta method for T / S over the full covariance.
        let grad: Vec<f64> = (0..q.len())
            .map(|i| if treat.contains(&i) { (s - t) / (s * s) } else { -t / (s * s) })
            .collect();
        ((t / s).clamp(0.0, 1.0), cov.quadratic_form(&grad).max(0.0).sqrt())
    } else {
        (0.0, 0.0)
    };

    Ok(ResponseResult {
        tumor_id: h.tumor_id.clone(),
        q_treatment_total: t,
        sigma_treatment: sigma,
        effect_fraction: fraction,
        effect_fraction_sigma: fraction_sigma,
        z,
        p_two_tailed: stats::p_two_tailed(z),
    })
}

/// Z-score from a responding fraction and its error, both in the same units.
pub fn z_from_effect(effect: f64, error: f64) -> f64 {
    effect / error
}

/// Stouffer's combination `sum z / sqrt(n)`.
pub fn stouffer(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput("no Z-scores to combine".into()));
    }
    Ok(z.iter().sum::<f64>() / (z.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMethod {
    Stouffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub per_tumor: Vec<ResponseResult>,
    pub combined_z: f64,
    pub combined_p: f64,
    pub method: CombineMethod,
}

impl CohortSummary {
    /// Per-tumor rows plus a final `combined` row. Effect and error are percentages.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(|e| Error::io("<response csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "tumor_id",
            "q_treatment_total",
            "sigma_treatment",
            "effect_pct",
            "error_pct",
            "z",
            "p_two_tailed",
        ])?;
        for r in &self.per_tumor {
            w.write_record([
                r.tumor_id.clone(),
                r.q_treatment_total.to_string(),
                r.sigma_treatment.to_string(),
                (100.0 * r.effect_fraction).to_string(),
                (100.0 * r.effect_fraction_sigma).to_string(),
                r.z.to_string(),
                r.p_two_tailed.to_string(),
            ])?;
        }
        w.write_record([
            "combined".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.combined_z.to_string(),
            self.combined_p.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io("<response csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), comment)
    }
}

pub fn combine_cohort(results: &[ResponseResult]) -> Result<CohortSummary> {
    let z: Vec<f64> = results.iter().map(|r| r.z).collect();
    let combined_z = stouffer(&z)?;
    Ok(CohortSummary {
        per_tumor: results.to_vec(),
        combined_z,
        combined_p: stats::p_two_tailed(combined_z),
        method: CombineMethod::Stouffer,
    })
}

/// Which chi-squared per degree of freedom scales the covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceScaling {
    /// Goodness of fit of the individual histogram (quantities fitted, PMFs fixed).
    PerHistogram,
    /// The value recorded when the model was trained, falling back to per-histogram.
    Training,
    /// Pure Poisson errors.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub scaling: CovarianceScaling,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            scaling: CovarianceScaling::PerHistogram,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Assessment {
    pub quantities: QuantityVector,
    pub diagnostics: FitDiagnostics,
    pub fit: GoodnessOfFit,
    pub covariance: QuantityCovariance,
    pub response: ResponseResult,
}

/// Fits `h` with `model` and derives the treatment response.
pub fn assess(model: &LpmModel, h: &Histogram2D, opts: &InferenceOptions) -> Result<Assessment> {
    let (q, diagnostics) = lpm::fit_quantities(model, h, opts.seed)?;
    let m = lpm::model_expectation(model, &q)?;
    let fit = selection::chi2_from_expectations(&[h.cells()], &[m], model.n_components(), ParameterCount::quantities_only())?;
    let scale = match opts.scaling {
        CovarianceScaling::PerHistogram => Some(fit),
        CovarianceScaling::Training => Some(match model.training_meta.chi2_per_dof {
            Some(v) => GoodnessOfFit {
                chi2_per_dof: v,
                ..fit
            },
            None => fit,
        }),
        CovarianceScaling::None => None,
    };
    let covariance = quantity_covariance(model, h, &q, scale.as_ref())?;
    let response = response_result(model, h, &q, &covariance)?;
    Ok(Assessment {
        quantities: q,
        diagnostics,
        fit,
        covariance,
        response,
    })
}

/// Fits the full model to control histograms; their treatment Z-scores
/// should be consistent with zero.
pub fn control_consistency(model: &LpmModel, controls: &[Histogram2D], opts: &InferenceOptions) -> Result<Vec<ResponseResult>> {
    if controls.is_empty() {
        return Err(Error::EmptyInput("no control histograms".into()));
    }
    controls.iter().map(|h| Ok(assess(model, h, opts)?.response)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stouffer_identities() {
        assert_eq!(stouffer(&[2.0]).unwrap(), 2.0);
        assert_eq!(stouffer(&[0.0; 10]).unwrap(), 0.0);
        assert!(stouffer(&[]).is_err());
    }

    #[test]
    fn pseudo_inverse_of_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, pseudo) = spd_inverse(&a);
        assert!(pseudo);
        // A A+ A = A
        let back = &a * &inv * &a;
        assert!((back - a).abs().max() < 1e-12);
    }
}
