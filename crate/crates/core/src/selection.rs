//! Goodness of fit on square-root transformed counts and the component-count sweep.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::Histogram2D;
use crate::lpm::{self, LpmModel, Phase, QuantityVector, TrainOptions, TrainOutput};

/// Variance of the square root of a Poisson variate.
pub const SQRT_POISSON_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodnessOfFit {
    pub chi2_per_dof: f64,
    pub dof: usize,
    pub raw_chi2: f64,
}

/// Which parameters were estimated from the histograms being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    /// Components whose PMFs were learnt from these histograms.
    pub trainable_components: usize,
    /// Whether every per-histogram quantity was fitted.
    pub fitted_quantities: bool,
}

impl ParameterCount {
    /// Model and quantities both fixed in advance.
    pub fn fixed() -> Self {
        ParameterCount {
            trainable_components: 0,
            fitted_quantities: false,
        }
    }

    /// PMFs fixed, quantities fitted per histogram.
    pub fn quantities_only() -> Self {
        ParameterCount {
            trainable_components: 0,
            fitted_quantities: true,
        }
    }

    pub fn training(trainable_components: usize) -> Self {
        ParameterCount {
            trainable_components,
            fitted_quantities: true,
        }
    }
}

/// Squared residual of one cell on the square-root scale, divided by the
/// stabilised variance.
pub fn cell_chi2(h: f64, m: f64) -> f64 {
    let d = h.sqrt() - m.sqrt();
    d * d / SQRT_POISSON_VARIANCE
}

/// Chi-squared per degree of freedom from raw counts and expectations.
///
/// Only cells with `H + M > 0` count towards the degrees of freedom. A
/// trainable PMF costs one parameter per informative cell less one for its
/// normalisation, where a cell is informative if any histogram or expectation
/// is non-zero there.
pub fn chi2_from_expectations(hists: &[Vec<f64>], expectations: &[Vec<f64>], n_components: usize, params: ParameterCount) -> Result<GoodnessOfFit> {
    if hists.is_empty() {
        return Err(Error::EmptyInput("no histograms to score".into()));
    }
    let n_cells = hists[0].len();
    let mut informative = vec![false; n_cells];
    let mut raw = 0.0;
    let mut used = 0usize;
    for (h, m) in hists.iter().zip(expectations) {
        if h.len() != n_cells || m.len() != n_cells {
            return Err(Error::ShapeMismatch("histogram and expectation grids differ".into()));
        }
        for c in 0..n_cells {
            if h[c] + m[c] > 0.0 {
                raw += cell_chi2(h[c], m[c]);
                used += 1;
                informative[c] = true;
            }
        }
    }
    let n_informative = informative.iter().filter(|&&b| b).count();
    let mut parameters = params.trainable_components * n_informative.saturating_sub(1);
    if params.fitted_quantities {
        parameters += hists.len() * n_components;
    }
    if used <= parameters {
        return Err(Error::OverParameterised {
            informative_cells: used,
            parameters,
        });
    }
    let dof = used - parameters;
    Ok(GoodnessOfFit {
        chi2_per_dof: raw / dof as f64,
        dof,
        raw_chi2: raw,
    })
}

/// Goodness of fit of `model` with per-histogram `quantities` to `histograms`.
pub fn chi2_per_dof(histograms: &[Histogram2D], model: &LpmModel, quantities: &[QuantityVector], params: ParameterCount) -> Result<GoodnessOfFit> {
    if histograms.len() != quantities.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} histograms but {} quantity vectors",
            histograms.len(),
            quantities.len()
        )));
    }
    let mut hists = Vec::with_capacity(histograms.len());
    let mut expectations = Vec::with_capacity(histograms.len());
    for (h, q) in histograms.iter().zip(quantities) {
        model.check_binning(h)?;
        hists.push(h.cells());
        expectations.push(lpm::model_expectation(model, q)?);
    }
    chi2_from_expectations(&hists, &expectations, model.n_components(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub n_components: usize,
    pub chi2_per_dof: f64,
    pub flagged_degenerate: bool,
    /// Held-out chi-squared per degree of freedom, when requested.
    pub loo_chi2_per_dof: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCurve {
    pub phase: Phase,
    pub points: Vec<SelectionPoint>,
    pub chosen: usize,
}

impl SelectionCurve {
    pub fn point(&self, n_components: usize) -> Option<&SelectionPoint> {
        self.points.iter().find(|p| p.n_components == n_components)
    }

    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(|e| Error::io("<selection csv>", e))?;
        }
        let with_loo = self.points.iter().any(|p| p.loo_chi2_per_dof.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["phase", "n_components", "chi2_per_dof", "degenerate", "chosen"];
        if with_loo {
            header.push("loo_chi2_per_dof");
        }
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![
                self.phase.to_string(),
                p.n_components.to_string(),
                p.chi2_per_dof.to_string(),
                p.flagged_degenerate.to_string(),
                (p.n_components == self.chosen).to_string(),
            ];
            if with_loo {
                row.push(p.loo_chi2_per_dof.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<selection csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), comment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub train: TrainOptions,
    /// Candidates within this distance of the minimum count as ties; the smallest wins.
    pub tie_tolerance: f64,
    /// Also compute held-out chi-squared per candidate (one extra training per histogram).
    pub loo_diagnostic: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            train: TrainOptions::default(),
            tie_tolerance: 0.02,
            loo_diagnostic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionOutput {
    pub curve: SelectionCurve,
    /// Training output at the chosen component count.
    pub best: TrainOutput,
    /// Candidates left off the curve, with the reason.
    pub skipped: Vec<(usize, String)>,
}

fn train_candidate(cohort: &[Histogram2D], phase: Phase, base: Option<&LpmModel>, k: usize, opts: &TrainOptions) -> Result<TrainOutput> {
    match (phase, base) {
        (Phase::Control, _) => lpm::train_control(cohort, k, opts),
        (Phase::Treatment, Some(b)) => lpm::train_treatment(b, cohort, k - b.n_control, opts),
        (Phase::Treatment, None) => Err(Error::Precondition("treatment sweep needs a control model".into())),
    }
}

fn trainable(phase: Phase, base: Option<&LpmModel>, k: usize) -> usize {
    match phase {
        Phase::Control => k,
        Phase::Treatment => k - base.map_or(0, |b| b.n_control),
    }
}

fn loo_chi2(cohort: &[Histogram2D], phase: Phase, base: Option<&LpmModel>, k: usize, opts: &TrainOptions) -> Result<f64> {
    let mut hists = Vec::new();
    let mut expectations = Vec::new();
    for i in 0..cohort.len() {
        let rest: Vec<Histogram2D> = cohort.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, h)| h.clone()).collect();
        let out = train_candidate(&rest, phase, base, k, opts)?;
        let (q, _) = lpm::fit_quantities(&out.model, &cohort[i], opts.seed)?;
        hists.push(cohort[i].cells());
        expectations.push(lpm::model_expectation(&out.model, &q)?);
    }
    Ok(chi2_from_expectations(&hists, &expectations, k, ParameterCount::quantities_only())?.chi2_per_dof)
}

/// Trains one model per component count in `k_min..=k_max` and picks the
/// smallest count whose chi-squared per degree of freedom is within the tie
/// tolerance of the minimum. For the treatment phase the counts include the
/// `base` model's control components.
pub fn select_components(
    cohort: &[Histogram2D],
    phase: Phase,
    base: Option<&LpmModel>,
    k_min: usize,
    k_max: usize,
    opts: &SelectionOptions,
) -> Result<SelectionOutput> {
    if cohort.is_empty() {
        return Err(Error::EmptyInput("selection cohort has no histograms".into()));
    }
    let floor = match (phase, base) {
        (Phase::Control, _) => 1,
        (Phase::Treatment, Some(b)) => b.n_control + 1,
        (Phase::Treatment, None) => {
            return Err(Error::Precondition("treatment sweep needs a control model".into()))
        }
    };
    if k_min < floor || k_max <= k_min {
        return Err(Error::InvalidInput(format!(
            "component range {k_min}..={k_max} invalid; need {floor} <= k_min < k_max"
        )));
    }

    let candidates: Vec<(usize, Result<TrainOutput>)> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| (k, train_candidate(cohort, phase, base, k, &opts.train)))
        .collect();

    let mut points = Vec::new();
    let mut outputs = Vec::new();
    let mut skipped = Vec::new();
    for (k, result) in candidates {
        let out = result?;
        let params = ParameterCount::training(trainable(phase, base, k));
        match chi2_per_dof(cohort, &out.model, &out.quantities, params) {
            Ok(gof) => {
                let loo = if opts.loo_diagnostic {
                    Some(loo_chi2(cohort, phase, base, k, &opts.train)?)
                } else {
                    None
                };
                points.push(SelectionPoint {
                    n_components: k,
                    chi2_per_dof: gof.chi2_per_dof,
                    flagged_degenerate: out.degenerate,
                    loo_chi2_per_dof: loo,
                });
                let mut out = out;
                out.model.training_meta.chi2_per_dof = Some(gof.chi2_per_dof);
                outputs.push(out);
            }
            Err(e @ Error::OverParameterised { .. }) => skipped.push((k, e.to_string())),
            Err(e) => return Err(e),
        }
    }

    let eligible: Vec<usize> = (0..points.len()).filter(|&i| !points[i].flagged_degenerate).collect();
    if eligible.is_empty() {
        let chosen = points.first().map_or(k_min, |p| p.n_components);
        return Err(Error::SelectionFailed {
            curve: Box::new(SelectionCurve { phase, points, chosen }),
        });
    }
    let minimum = eligible.iter().map(|&i| points[i].chi2_per_dof).fold(f64::INFINITY, f64::min);
    let pick = eligible
        .into_iter()
        .find(|&i| points[i].chi2_per_dof <= minimum + opts.tie_tolerance)
        .expect("minimum is attained");
    let chosen = points[pick].n_components;
    let best = outputs.swap_remove(pick);
    Ok(SelectionOutput {
        curve: SelectionCurve { phase, points, chosen },
        best,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_model_scores_zero() {
        let h = vec![vec![4.0, 0.0, 9.0, 1.0]];
        let g = chi2_from_expectations(&h, &h, 1, ParameterCount::fixed()).unwrap();
        assert_eq!(g.raw_chi2, 0.0);
        assert_eq!(g.chi2_per_dof, 0.0);
        assert_eq!(g.dof, 3);
    }

    #[test]
    fn single_cell_contribution() {
        assert_eq!(cell_chi2(4.0, 1.0), 4.0);
    }

    #[test]
    fn dof_accounting() {
        let h = vec![vec![4.0, 0.0, 9.0, 1.0, 0.0], vec![1.0, 2.0, 0.0, 3.0, 0.0]];
        let m = h.clone();
        // 6 used cells; 4 informative cells -> one trainable PMF costs 3, plus 2 x 1 quantities.
        let g = chi2_from_expectations(&h, &m, 1, ParameterCount::training(1)).unwrap();
        assert_eq!(g.dof, 1);
        assert!(matches!(
            chi2_from_expectations(&h, &m, 2, ParameterCount::training(2)),
            Err(Error::OverParameterised { .. })
        ));
    }

    #[test]
    fn permutation_invariant() {
        let h = vec![vec![4.0, 0.0, 9.0, 1.0], vec![2.0, 5.0, 1.0, 0.0]];
        let m = vec![vec![3.0, 0.5, 8.0, 1.5], vec![2.5, 4.0, 1.0, 0.5]];
        let a = chi2_from_expectations(&h, &m, 2, ParameterCount::quantities_only()).unwrap();
        let hr: Vec<Vec<f64>> = h.iter().rev().map(|v| v.iter().rev().copied().collect()).collect();
        let mr: Vec<Vec<f64>> = m.iter().rev().map(|v| v.iter().rev().copied().collect()).collect();
        let b = chi2_from_expectations(&hr, &mr, 2, ParameterCount::quantities_only()).unwrap();
        assert!((a.chi2_per_dof - b.chi2_per_dof).abs() < 1e-12);
        assert_eq!(a.dof, b.dof);
    }
}
