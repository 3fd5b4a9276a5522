//! Linear Poisson models: shared component PMFs over the (ADC bin x timepoint)
//! grid with per-histogram non-negative quantities.
//!
//! Training happens in two phases. [`train_control`] learns `N_C` components
//! from the control cohort; [`train_treatment`] freezes them and learns `N_T`
//! extra components from the treated cohort.

pub mod em;
pub mod quantities;

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::{BinningConfig, Histogram2D, N_TIMEPOINTS};
use em::EmSettings;

/// Uniform admixture added to every random PMF so no cell starts at exactly zero.
const INIT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Control,
    Treatment,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Control => "control",
            Phase::Treatment => "treatment",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Phase::Control),
            "treatment" | "treated" => Ok(Phase::Treatment),
            other => Err(Error::InvalidInput(format!("unknown phase '{other}'"))),
        }
    }
}

/// One component PMF, flattened in canonical cell order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ComponentJson", try_from = "ComponentJson")]
pub struct ComponentPmf {
    pub phase: Phase,
    pub index: usize,
    pub probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    phase: Phase,
    probs: Vec<[f64; N_TIMEPOINTS]>,
}

impl From<ComponentPmf> for ComponentJson {
    fn from(c: ComponentPmf) -> Self {
        ComponentJson {
            phase: c.phase,
            probs: c.probs.chunks_exact(N_TIMEPOINTS).map(|r| [r[0], r[1]]).collect(),
        }
    }
}

impl TryFrom<ComponentJson> for ComponentPmf {
    type Error = Error;

    fn try_from(c: ComponentJson) -> Result<Self> {
        Ok(ComponentPmf {
            phase: c.phase,
            index: 0,
            probs: c.probs.into_iter().flatten().collect(),
        })
    }
}

impl ComponentPmf {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "component {} has negative or non-finite cells",
                self.index
            )));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "component {} sums to {total}, not 1",
                self.index
            )));
        }
        Ok(())
    }
}

/// Per-phase training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub n_histograms: usize,
    pub best_restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    pub degenerate: bool,
    pub restart_logliks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub restarts: usize,
    pub iterations: usize,
    pub final_loglik: f64,
    pub chi2_per_dof: Option<f64>,
    #[serde(default)]
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpmModel {
    pub binning: BinningConfig,
    pub n_control: usize,
    pub n_treatment: usize,
    pub components: Vec<ComponentPmf>,
    pub training_meta: TrainingMeta,
}

impl LpmModel {
    pub fn n_components(&self) -> usize {
        self.n_control + self.n_treatment
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.probs.clone()).collect()
    }

    pub fn treatment_indices(&self) -> std::ops::Range<usize> {
        self.n_control..self.n_components()
    }

    /// True when any training phase ended with a collapsed component.
    pub fn is_degenerate(&self) -> bool {
        self.training_meta.phases.iter().any(|p| p.degenerate)
    }

    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if self.n_control == 0 {
            return Err(Error::InvalidInput("model has no control components".into()));
        }
        if self.components.len() != self.n_components() {
            return Err(Error::ShapeMismatch(format!(
                "{} components listed, header declares {} + {}",
                self.components.len(),
                self.n_control,
                self.n_treatment
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.probs.len() != self.binning.n_cells() {
                return Err(Error::ShapeMismatch(format!(
                    "component {i} has {} cells, binning needs {}",
                    c.probs.len(),
                    self.binning.n_cells()
                )));
            }
            let expected = if i < self.n_control { Phase::Control } else { Phase::Treatment };
            if c.phase != expected {
                return Err(Error::InvalidInput(format!(
                    "component {i} labelled {} but sits in the {expected} block",
                    c.phase
                )));
            }
            c.validate()?;
        }
        Ok(())
    }

    /// Copy restricted to the control components.
    pub fn control_only(&self) -> LpmModel {
        let mut m = self.clone();
        m.components.truncate(self.n_control);
        m.n_treatment = 0;
        m.training_meta.phases.retain(|p| p.phase == Phase::Control);
        m
    }

    pub fn check_binning(&self, h: &Histogram2D) -> Result<()> {
        h.validate()?;
        if h.binning != self.binning {
            return Err(Error::ShapeMismatch(format!(
                "histogram {} binning {:?} differs from model binning {:?}",
                h.tumor_id, h.binning, self.binning
            )));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut model: LpmModel = serde_json::from_str(text)?;
        model.renumber();
        model.validate()?;
        Ok(model)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::histograms::write_text(path, &self.to_json_string()?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut model: LpmModel = serde_json::from_reader(BufReader::new(file))?;
        model.renumber();
        model.validate()?;
        Ok(model)
    }

    fn renumber(&mut self) {
        for (i, c) in self.components.iter_mut().enumerate() {
            c.index = i;
        }
    }
}

/// Fitted quantities of one histogram, in voxel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantityVector(pub Vec<f64>);

impl QuantityVector {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Extended log-likelihood `sum H ln M - sum q` (constant `ln H!` omitted).
    pub log_likelihood: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
}

/// Quantity whose relative change between iterations decides convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// The extended log-likelihood itself.
    LogLikelihood,
    /// The gap to the saturated model, which keeps shrinking in relative
    /// terms long after the log-likelihood has stopped moving.
    Deficit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative change treated as converged.
    pub tolerance: f64,
    pub convergence: Convergence,
    /// Symmetric Dirichlet concentration for random PMF initialisation.
    pub init_concentration: f64,
    /// Component mass fraction below which a trainable component counts as collapsed.
    pub degeneracy_threshold: f64,
    /// Weight the random initial PMFs of components added to a frozen model
    /// by the counts that model cannot explain.
    pub residual_init: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            restarts: 5,
            max_iter: 10_000,
            tolerance: 1e-9,
            convergence: Convergence::LogLikelihood,
            init_concentration: 0.03,
            degeneracy_threshold: 1e-6,
            residual_init: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidInput(format!("tolerance {} must be positive", self.tolerance)));
        }
        if !(self.init_concentration > 0.0 && self.init_concentration.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "init_concentration {} must be positive",
                self.init_concentration
            )));
        }
        Ok(())
    }

    fn em_settings(&self, saturated: f64) -> EmSettings {
        EmSettings {
            max_iter: self.max_iter,
            tolerance: self.tolerance,
            reference: match self.convergence {
                Convergence::LogLikelihood => saturated,
                Convergence::Deficit => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LpmModel,
    /// Converged per-histogram quantities, in cohort order.
    pub quantities: Vec<QuantityVector>,
    pub diagnostics: FitDiagnostics,
    /// Final diagnostics of every restart, by restart index.
    pub restarts: Vec<FitDiagnostics>,
    pub degenerate: bool,
    /// Iterations (summed over restarts) where the likelihood fell by more than round-off.
    pub monotone_violations: usize,
    /// Per-iteration log-likelihood of the winning restart.
    pub trace: Vec<f64>,
}

fn check_cohort(cohort: &[Histogram2D], binning: Option<&BinningConfig>) -> Result<BinningConfig> {
    let first = cohort
        .first()
        .ok_or_else(|| Error::EmptyInput("training cohort has no histograms".into()))?;
    let binning = *binning.unwrap_or(&first.binning);
    for h in cohort {
        h.validate()?;
        if h.binning != binning {
            return Err(Error::ShapeMismatch(format!(
                "histogram {} uses a different binning from the rest of the cohort",
                h.tumor_id
            )));
        }
        if h.total() == 0 {
            return Err(Error::EmptyInput(format!("histogram {} has no counts", h.tumor_id)));
        }
    }
    Ok(binning)
}

fn random_pmf(rng: &mut ChaCha8Rng, n_cells: usize, concentration: f64, weights: Option<&[f64]>) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let mut p: Vec<f64> = (0..n_cells)
        .map(|c| gamma.sample(rng) * weights.map_or(1.0, |w| w[c]))
        .collect();
    let s: f64 = p.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        p.iter_mut().for_each(|v| *v = 1.0);
    }
    let s: f64 = p.iter().sum();
    let floor = INIT_FLOOR / n_cells as f64;
    for v in p.iter_mut() {
        *v = (1.0 - INIT_FLOOR) * *v / s + floor;
    }
    p
}

struct RestartResult {
    probs: Vec<Vec<f64>>,
    quantities: Vec<Vec<f64>>,
    deficit: f64,
    iterations: usize,
    converged: bool,
    degenerate: bool,
    monotone_violations: usize,
    trace: Vec<f64>,
}

fn collapsed(quantities: &[Vec<f64>], trainable: &[bool], grand_total: f64, threshold: f64) -> Vec<usize> {
    (0..trainable.len())
        .filter(|&k| trainable[k] && quantities.iter().map(|q| q[k]).sum::<f64>() < threshold * grand_total)
        .collect()
}

/// Summed positive part of `H - M` per cell; uniform when nothing is under-predicted.
fn positive_residual(hists: &[Vec<f64>], probs: &[Vec<f64>], quantities: &[Vec<f64>]) -> Vec<f64> {
    let n_cells = hists[0].len();
    let mut residual = vec![0.0; n_cells];
    let mut m = vec![0.0; n_cells];
    for (h, q) in hists.iter().zip(quantities) {
        em::expectation_into(probs, q, &mut m);
        for c in 0..n_cells {
            residual[c] += (h[c] - m[c]).max(0.0);
        }
    }
    if residual.iter().all(|&r| r <= 0.0) {
        residual.iter_mut().for_each(|r| *r = 1.0);
    }
    residual
}

fn run_restart(
    hists: &[Vec<f64>],
    fixed: &[Vec<f64>],
    n_new: usize,
    opts: &TrainOptions,
    restart: usize,
    saturated: f64,
    init_weights: Option<&[f64]>,
) -> RestartResult {
    let n_cells = hists[0].len();
    let k = fixed.len() + n_new;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
    let mut probs: Vec<Vec<f64>> = fixed.to_vec();
    for _ in 0..n_new {
        probs.push(random_pmf(&mut rng, n_cells, opts.init_concentration, init_weights));
    }
    let totals: Vec<f64> = hists.iter().map(|h| h.iter().sum()).collect();
    let grand_total: f64 = totals.iter().sum();
    let mut quantities: Vec<Vec<f64>> = totals.iter().map(|&t| vec![t / k as f64; k]).collect();
    let trainable: Vec<bool> = (0..k).map(|i| i >= fixed.len()).collect();

    let mut outcome = em::run(hists, &mut probs, &mut quantities, &trainable, opts.em_settings(saturated), true);
    let mut violations = outcome.monotone_violations;
    let mut degenerate = false;

    let dead = collapsed(&quantities, &trainable, grand_total, opts.degeneracy_threshold);
    if !dead.is_empty() {
        // Re-seed collapsed components towards the cells the model under-predicts.
        let residual = positive_residual(hists, &probs, &quantities);
        for &d in &dead {
            probs[d] = random_pmf(&mut rng, n_cells, opts.init_concentration, Some(&residual));
            for (q, &t) in quantities.iter_mut().zip(&totals) {
                q[d] = t / k as f64;
            }
        }
        let prior_trace = std::mem::take(&mut outcome.trace);
        outcome = em::run(hists, &mut probs, &mut quantities, &trainable, opts.em_settings(saturated), true);
        violations += outcome.monotone_violations;
        outcome.iterations += prior_trace.len();
        let mut trace = prior_trace;
        trace.append(&mut outcome.trace);
        outcome.trace = trace;
        degenerate = !collapsed(&quantities, &trainable, grand_total, opts.degeneracy_threshold).is_empty();
    }

    RestartResult {
        probs,
        quantities,
        deficit: outcome.deficit,
        iterations: outcome.iterations,
        converged: outcome.converged,
        degenerate,
        monotone_violations: violations,
        trace: outcome.trace,
    }
}

/// PMFs, quantities, phase record, per-restart diagnostics, monotonicity
/// violations and the winning trace.
type PhaseFit = (Vec<Vec<f64>>, Vec<QuantityVector>, PhaseRecord, Vec<FitDiagnostics>, usize, Vec<f64>);

fn train_phase(
    cohort: &[Histogram2D],
    fixed: &[Vec<f64>],
    n_new: usize,
    phase: Phase,
    opts: &TrainOptions,
) -> Result<PhaseFit> {
    opts.validate()?;
    let hists: Vec<Vec<f64>> = cohort.iter().map(Histogram2D::cells).collect();
    let saturated: f64 = hists.iter().map(|h| em::saturated_loglik(h)).sum();
    let init_weights = if opts.residual_init && !fixed.is_empty() {
        let k = fixed.len();
        let q: Vec<Vec<f64>> = hists
            .iter()
            .map(|h| quantities::maximise(fixed, h, &vec![h.iter().sum::<f64>() / k as f64; k]).q)
            .collect();
        Some(positive_residual(&hists, fixed, &q))
    } else {
        None
    };

    let results: Vec<RestartResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| run_restart(&hists, fixed, n_new, opts, r, saturated, init_weights.as_deref()))
        .collect();

    // Highest likelihood wins; ties go to the lowest restart index.
    let best = results
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.deficit > results[b].deficit { i } else { b });
    let restarts: Vec<FitDiagnostics> = results
        .iter()
        .enumerate()
        .map(|(i, r)| FitDiagnostics {
            log_likelihood: saturated + r.deficit,
            n_iterations: r.iterations,
            converged: r.converged,
            restart_index: i,
        })
        .collect();
    let violations = results.iter().map(|r| r.monotone_violations).sum();
    let winner = &results[best];

    let quantities: Vec<QuantityVector> = hists
        .iter()
        .zip(&winner.quantities)
        .map(|(h, q)| QuantityVector(quantities::maximise(&winner.probs, h, q).q))
        .collect();

    let record = PhaseRecord {
        phase,
        n_histograms: cohort.len(),
        best_restart: best,
        iterations: winner.iterations,
        converged: winner.converged,
        log_likelihood: saturated + winner.deficit,
        degenerate: winner.degenerate,
        restart_logliks: restarts.iter().map(|d| d.log_likelihood).collect(),
    };
    let trace = winner.trace.iter().map(|d| saturated + d).collect();
    Ok((winner.probs.clone(), quantities, record, restarts, violations, trace))
}

fn components_from(probs: &[Vec<f64>], n_control: usize) -> Vec<ComponentPmf> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| ComponentPmf {
            phase: if i < n_control { Phase::Control } else { Phase::Treatment },
            index: i,
            probs: p.clone(),
        })
        .collect()
}

/// Learns `n_control` shared PMFs and per-histogram quantities from a control cohort.
pub fn train_control(cohort: &[Histogram2D], n_control: usize, opts: &TrainOptions) -> Result<TrainOutput> {
    let binning = check_cohort(cohort, None)?;
    if n_control == 0 {
        return Err(Error::InvalidInput("n_control must be at least 1".into()));
    }
    let (probs, quantities, record, restarts, violations, trace) =
        train_phase(cohort, &[], n_control, Phase::Control, opts)?;
    let diagnostics = restarts[record.best_restart].clone();
    let degenerate = record.degenerate;
    let model = LpmModel {
        binning,
        n_control,
        n_treatment: 0,
        components: components_from(&probs, n_control),
        training_meta: TrainingMeta {
            seed: opts.seed,
            restarts: opts.restarts,
            iterations: record.iterations,
            final_loglik: record.log_likelihood,
            chi2_per_dof: None,
            phases: vec![record],
        },
    };
    Ok(TrainOutput {
        model,
        quantities,
        diagnostics,
        restarts,
        degenerate,
        monotone_violations: violations,
        trace,
    })
}

/// Adds `n_treatment` PMFs learnt from a treated cohort while the control
/// components of `control_model` stay fixed bit for bit.
pub fn train_treatment(
    control_model: &LpmModel,
    cohort: &[Histogram2D],
    n_treatment: usize,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    control_model.validate()?;
    if control_model.n_treatment != 0 {
        return Err(Error::Precondition(format!(
            "treatment training needs a control-only model, got {} treatment components",
            control_model.n_treatment
        )));
    }
    let binning = check_cohort(cohort, Some(&control_model.binning))?;
    let fixed = control_model.probs();

    if n_treatment == 0 {
        let mut out = Vec::with_capacity(cohort.len());
        let mut ll = 0.0;
        let mut iterations = 0;
        let mut converged = true;
        for h in cohort {
            let (q, d) = fit_quantities(control_model, h, opts.seed)?;
            ll += d.log_likelihood;
            iterations += d.n_iterations;
            converged &= d.converged;
            out.push(q);
        }
        let diagnostics = FitDiagnostics {
            log_likelihood: ll,
            n_iterations: iterations,
            converged,
            restart_index: 0,
        };
        return Ok(TrainOutput {
            model: control_model.clone(),
            quantities: out,
            diagnostics: diagnostics.clone(),
            restarts: vec![diagnostics],
            degenerate: false,
            monotone_violations: 0,
            trace: Vec::new(),
        });
    }

    let (probs, quantities, record, restarts, violations, trace) =
        train_phase(cohort, &fixed, n_treatment, Phase::Treatment, opts)?;
    if probs[..fixed.len()]
        .iter()
        .zip(&fixed)
        .any(|(a, b)| a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()))
    {
        return Err(Error::InternalConsistency(
            "control components changed during treatment training".into(),
        ));
    }
    let diagnostics = restarts[record.best_restart].clone();
    let degenerate = record.degenerate;
    let n_control = control_model.n_control;
    let mut meta = control_model.training_meta.clone();
    meta.iterations += record.iterations;
    meta.final_loglik = record.log_likelihood;
    meta.chi2_per_dof = None;
    meta.phases.push(record);
    let model = LpmModel {
        binning,
        n_control,
        n_treatment,
        components: components_from(&probs, n_control),
        training_meta: meta,
    };
    Ok(TrainOutput {
        model,
        quantities,
        diagnostics,
        restarts,
        degenerate,
        monotone_violations: violations,
        trace,
    })
}

/// Relative agreement required between quantity fits from different starts.
const FIT_AGREEMENT: f64 = 1e-8;

/// Maximises the extended likelihood of `h` over quantities with PMFs fixed.
///
/// The objective is concave in the quantities, so the result does not depend
/// on `seed`: a seeded random start is fitted as a cross-check and any
/// disagreement clears `converged`.
pub fn fit_quantities(model: &LpmModel, h: &Histogram2D, seed: u64) -> Result<(QuantityVector, FitDiagnostics)> {
    model.check_binning(h)?;
    let total = h.total() as f64;
    if total == 0.0 {
        return Err(Error::EmptyInput(format!("histogram {} has no counts", h.tumor_id)));
    }
    let cells = h.cells();
    let probs = model.probs();
    let k = probs.len();

    let uniform = quantities::maximise(&probs, &cells, &vec![total / k as f64; k]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    let mut start: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng) + 1e-3).collect();
    let s: f64 = start.iter().sum();
    start.iter_mut().for_each(|v| *v *= total / s);
    let seeded = quantities::maximise(&probs, &cells, &start);

    let agree = uniform
        .q
        .iter()
        .zip(&seeded.q)
        .all(|(a, b)| (a - b).abs() <= FIT_AGREEMENT * total);

    Ok((
        QuantityVector(uniform.q),
        FitDiagnostics {
            log_likelihood: uniform.log_likelihood,
            n_iterations: uniform.iterations,
            converged: uniform.converged && agree,
            restart_index: 0,
        },
    ))
}

/// Expected counts `M(cell) = sum_k probs_k(cell) q_k`.
pub fn model_expectation(model: &LpmModel, q: &QuantityVector) -> Result<Vec<f64>> {
    if q.len() != model.n_components() {
        return Err(Error::ShapeMismatch(format!(
            "{} quantities for a model with {} components",
            q.len(),
            model.n_components()
        )));
    }
    let mut m = vec![0.0; model.binning.n_cells()];
    em::expectation_into(&model.probs(), q.as_slice(), &mut m);
    Ok(m)
}

/// Extended log-likelihood `sum H ln M - sum q` of one histogram.
pub fn log_likelihood(model: &LpmModel, h: &Histogram2D, q: &QuantityVector) -> Result<f64> {
    model.check_binning(h)?;
    let m = model_expectation(model, q)?;
    let mut ll = 0.0;
    for (hc, mc) in h.cells().iter().zip(&m) {
        if *hc > 0.0 {
            ll += hc * mc.max(em::EXPECTATION_FLOOR).ln();
        }
    }
    Ok(ll - q.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histograms::Cohort;

    fn binning() -> BinningConfig {
        BinningConfig::new(0.0, 3e-3, 4).unwrap()
    }

    fn hist(id: &str, cells: &[u64]) -> Histogram2D {
        Histogram2D::from_cells(id, Cohort::Control, binning(), cells).unwrap()
    }

    #[test]
    fn one_component_recovers_normalised_histogram() {
        let h = hist("a", &[3, 0, 7, 1, 0, 0, 4, 5]);
        let out = train_control(std::slice::from_ref(&h), 1, &TrainOptions::default()).unwrap();
        let p = &out.model.components[0].probs;
        for (pc, hc) in p.iter().zip(h.cells()) {
            assert!((pc - hc / 20.0).abs() < 1e-9);
        }
        assert!((out.quantities[0].0[0] - 20.0).abs() < 1e-9);
        let ll = log_likelihood(&out.model, &h, &out.quantities[0]).unwrap();
        assert!((out.diagnostics.log_likelihood - ll).abs() < 1e-9 * ll.abs());
    }

    #[test]
    fn empty_cohort_rejected() {
        assert!(matches!(
            train_control(&[], 2, &TrainOptions::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let h = hist("a", &[3, 1, 7, 1, 2, 9, 4, 5]);
        let out = train_control(&[h.clone(), hist("b", &[1, 4, 2, 2, 8, 1, 0, 3])], 2, &TrainOptions::default()).unwrap();
        let text = out.model.to_json_string().unwrap();
        let back = LpmModel::from_json_str(&text).unwrap();
        assert_eq!(back, out.model);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["components"][0]["probs"].as_array().unwrap().len(), 4);
        assert_eq!(v["components"][0]["phase"], "control");
    }

    #[test]
    fn expectation_total_matches_quantities() {
        let h = hist("a", &[3, 1, 7, 1, 2, 9, 4, 5]);
        let out = train_control(std::slice::from_ref(&h), 2, &TrainOptions::default()).unwrap();
        let q = QuantityVector(vec![12.5, 3.25]);
        let m = model_expectation(&out.model, &q).unwrap();
        assert!((m.iter().sum::<f64>() - 15.75).abs() < 1e-12);
        let zero = model_expectation(&out.model, &QuantityVector(vec![0.0, 0.0])).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(model_expectation(&out.model, &QuantityVector(vec![1.0])).is_err());
    }
}
