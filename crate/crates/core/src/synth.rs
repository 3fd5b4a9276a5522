//! Synthetic cohorts with known components and quantities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::{BinningConfig, Cohort, Histogram2D, N_TIMEPOINTS};
use crate::lpm::{ComponentPmf, Phase};

/// Part of one control tumor's expected counts drawn from a treatment PMF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    /// Index into the control cohort.
    pub tumor: usize,
    pub fraction: f64,
    /// Index into the treatment PMFs.
    pub treatment_component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub binning: BinningConfig,
    pub control_pmfs: Vec<ComponentPmf>,
    pub treatment_pmfs: Vec<ComponentPmf>,
    /// `(control tumors, treated tumors)`
    pub cohort_sizes: (usize, usize),
    /// Expected total counts per tumor.
    pub counts_per_tumor: f64,
    /// Dirichlet concentration per component (control then treatment).
    pub quantity_dirichlet_alpha: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub contamination: Option<Contamination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorTruth {
    pub tumor_id: String,
    pub cohort: Cohort,
    /// Expected counts per component; contaminated controls carry the extra
    /// treatment quantity after the control block.
    pub quantities: Vec<f64>,
    pub effect_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_control_components: usize,
    pub n_treatment_components: usize,
    pub control: Vec<TumorTruth>,
    pub treated: Vec<TumorTruth>,
}

impl GroundTruth {
    pub fn effect_fractions(&self) -> Vec<f64> {
        self.treated.iter().map(|t| t.effect_fraction).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub control: Vec<Histogram2D>,
    pub treated: Vec<Histogram2D>,
    pub truth: GroundTruth,
}

impl SynthSpec {
    pub fn n_components(&self) -> usize {
        self.control_pmfs.len() + self.treatment_pmfs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if self.control_pmfs.is_empty() {
            return Err(Error::InvalidInput("at least one control PMF is required".into()));
        }
        for c in self.control_pmfs.iter().chain(&self.treatment_pmfs) {
            if c.probs.len() != self.binning.n_cells() {
                return Err(Error::ShapeMismatch(format!(
                    "PMF with {} cells for a grid of {}",
                    c.probs.len(),
                    self.binning.n_cells()
                )));
            }
            c.validate()?;
        }
        if !(self.counts_per_tumor > 0.0 && self.counts_per_tumor.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "counts_per_tumor must be positive, got {}",
                self.counts_per_tumor
            )));
        }
        if self.quantity_dirichlet_alpha.len() != self.n_components() {
            return Err(Error::ShapeMismatch(format!(
                "{} Dirichlet concentrations for {} components",
                self.quantity_dirichlet_alpha.len(),
                self.n_components()
            )));
        }
        if self.quantity_dirichlet_alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidInput("Dirichlet concentrations must be positive".into()));
        }
        if self.cohort_sizes.1 > 0 && self.treatment_pmfs.is_empty() {
            return Err(Error::InvalidInput("treated tumors need treatment PMFs".into()));
        }
        if let Some(c) = self.contamination {
            if c.tumor >= self.cohort_sizes.0
                || c.treatment_component >= self.treatment_pmfs.len()
                || !(0.0..=1.0).contains(&c.fraction)
            {
                return Err(Error::InvalidInput(format!("invalid contamination {c:?}")));
            }
        }
        Ok(())
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated concentration").sample(rng))
        .collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    w
}

fn poisson_cells(rng: &mut ChaCha8Rng, m: &[f64]) -> Vec<u64> {
    m.iter()
        .map(|&mc| {
            if mc > 0.0 {
                Poisson::new(mc).expect("positive mean").sample(rng) as u64
            } else {
                0
            }
        })
        .collect()
}

fn expectation(pmfs: &[&ComponentPmf], q: &[f64], n_cells: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_cells];
    for (p, &qk) in pmfs.iter().zip(q) {
        for (mc, pc) in m.iter_mut().zip(&p.probs) {
            *mc += qk * pc;
        }
    }
    m
}

/// Draws both cohorts: Dirichlet-scaled quantities per tumor, then an
/// independent Poisson count per cell.
pub fn generate(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_cells = spec.binning.n_cells();
    let nc = spec.control_pmfs.len();
    let all: Vec<&ComponentPmf> = spec.control_pmfs.iter().chain(&spec.treatment_pmfs).collect();

    let mut control = Vec::new();
    let mut control_truth = Vec::new();
    for i in 0..spec.cohort_sizes.0 {
        let id = format!("C{:02}", i + 1);
        let mut q: Vec<f64> = dirichlet(&mut rng, &spec.quantity_dirichlet_alpha[..nc])
            .into_iter()
            .map(|w| w * spec.counts_per_tumor)
            .collect();
        let mut pmfs: Vec<&ComponentPmf> = spec.control_pmfs.iter().collect();
        let mut effect = 0.0;
        if let Some(c) = spec.contamination.filter(|c| c.tumor == i) {
            q.iter_mut().for_each(|v| *v *= 1.0 - c.fraction);
            q.push(c.fraction * spec.counts_per_tumor);
            pmfs.push(&spec.treatment_pmfs[c.treatment_component]);
            effect = c.fraction;
        }
        let m = expectation(&pmfs, &q, n_cells);
        let cells = poisson_cells(&mut rng, &m);
        control.push(Histogram2D::from_cells(&id, Cohort::Control, spec.binning, &cells)?);
        control_truth.push(TumorTruth {
            tumor_id: id,
            cohort: Cohort::Control,
            quantities: q,
            effect_fraction: effect,
        });
    }

    let mut treated = Vec::new();
    let mut treated_truth = Vec::new();
    for j in 0..spec.cohort_sizes.1 {
        let id = format!("T{:02}", j + 1);
        let q: Vec<f64> = dirichlet(&mut rng, &spec.quantity_dirichlet_alpha)
            .into_iter()
            .map(|w| w * spec.counts_per_tumor)
            .collect();
        let m = expectation(&all, &q, n_cells);
        let cells = poisson_cells(&mut rng, &m);
        treated.push(Histogram2D::from_cells(&id, Cohort::Treated, spec.binning, &cells)?);
        let effect = q[nc..].iter().sum::<f64>() / q.iter().sum::<f64>();
        treated_truth.push(TumorTruth {
            tumor_id: id,
            cohort: Cohort::Treated,
            quantities: q,
            effect_fraction: effect,
        });
    }

    Ok(SyntheticData {
        control,
        treated,
        truth: GroundTruth {
            n_control_components: nc,
            n_treatment_components: spec.treatment_pmfs.len(),
            control: control_truth,
            treated: treated_truth,
        },
    })
}

/// Two-timepoint PMF: a discretised Gaussian in ADC at each timepoint, with
/// `baseline_weight` of the mass at baseline and the rest at followup.
pub fn bump(binning: &BinningConfig, mu: [f64; N_TIMEPOINTS], sd: [f64; N_TIMEPOINTS], baseline_weight: f64) -> Vec<f64> {
    let n = binning.n_adc_bins;
    let weights = [baseline_weight, 1.0 - baseline_weight];
    let mut probs = vec![0.0; binning.n_cells()];
    for t in 0..N_TIMEPOINTS {
        let g: Vec<f64> = (0..n)
            .map(|b| (-0.5 * ((binning.center(b) - mu[t]) / sd[t]).powi(2)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        for b in 0..n {
            probs[b * N_TIMEPOINTS + t] = weights[t] * g[b] / s;
        }
    }
    probs
}

/// Mixes `probs` with the uniform PMF, keeping `1 - floor` of the original mass.
pub fn with_uniform_floor(probs: &[f64], floor: f64) -> Vec<f64> {
    let u = 1.0 / probs.len() as f64;
    probs.iter().map(|p| (1.0 - floor) * p + floor * u).collect()
}

fn components(phase: Phase, probs: Vec<Vec<f64>>) -> Vec<ComponentPmf> {
    probs
        .into_iter()
        .enumerate()
        .map(|(index, probs)| ComponentPmf { phase, index, probs })
        .collect()
}

/// Expected counts per synthetic tumor.
pub const DEFAULT_COUNTS: f64 = 20_000.0;
/// Per-component Dirichlet concentration of the presets.
pub const PRESET_MIXING_ALPHA: f64 = 0.5;

/// Three control and two treatment components; 8 control and 10 treated tumors.
pub fn lovo_like(seed: u64) -> SynthSpec {
    let b = BinningConfig::default();
    let control = vec![
        bump(&b, [0.55e-3, 0.60e-3], [0.10e-3, 0.10e-3], 0.47),
        bump(&b, [0.95e-3, 1.00e-3], [0.12e-3, 0.12e-3], 0.46),
        bump(&b, [1.40e-3, 1.45e-3], [0.12e-3, 0.14e-3], 0.48),
    ];
    let treatment = vec![
        bump(&b, [0.75e-3, 2.00e-3], [0.12e-3, 0.15e-3], 0.55),
        bump(&b, [1.15e-3, 2.50e-3], [0.12e-3, 0.15e-3], 0.60),
    ];
    SynthSpec {
        binning: b,
        control_pmfs: components(Phase::Control, control),
        treatment_pmfs: components(Phase::Treatment, treatment),
        cohort_sizes: (8, 10),
        counts_per_tumor: DEFAULT_COUNTS,
        quantity_dirichlet_alpha: vec![PRESET_MIXING_ALPHA; 5],
        seed,
        contamination: None,
    }
}

/// Four control and five treatment components; 13 control and 15 treated tumors.
pub fn hct_like(seed: u64) -> SynthSpec {
    let b = BinningConfig::default();
    let control = vec![
        bump(&b, [0.45e-3, 0.50e-3], [0.08e-3, 0.08e-3], 0.47),
        bump(&b, [0.80e-3, 0.85e-3], [0.09e-3, 0.09e-3], 0.46),
        bump(&b, [1.15e-3, 1.20e-3], [0.10e-3, 0.10e-3], 0.48),
        bump(&b, [1.50e-3, 1.55e-3], [0.10e-3, 0.12e-3], 0.47),
    ];
    let treatment = vec![
        bump(&b, [0.60e-3, 1.85e-3], [0.09e-3, 0.12e-3], 0.55),
        bump(&b, [0.95e-3, 2.20e-3], [0.09e-3, 0.12e-3], 0.58),
        bump(&b, [1.30e-3, 2.55e-3], [0.10e-3, 0.12e-3], 0.60),
        bump(&b, [0.60e-3, 2.75e-3], [0.09e-3, 0.10e-3], 0.62),
        bump(&b, [1.30e-3, 1.95e-3], [0.10e-3, 0.10e-3], 0.56),
    ];
    SynthSpec {
        binning: b,
        control_pmfs: components(Phase::Control, control),
        treatment_pmfs: components(Phase::Treatment, treatment),
        cohort_sizes: (13, 15),
        counts_per_tumor: DEFAULT_COUNTS,
        quantity_dirichlet_alpha: vec![PRESET_MIXING_ALPHA; 9],
        seed,
        contamination: None,
    }
}

/// Named presets.
pub fn default_scenarios(seed: u64) -> Vec<(&'static str, SynthSpec)> {
    vec![("lovo_like", lovo_like(seed)), ("hct_like", hct_like(seed))]
}

pub fn preset(name: &str, seed: u64) -> Option<SynthSpec> {
    default_scenarios(seed).into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
}

/// Largest generating component count supported by [`selection_scenario`].
pub const SELECTION_MAX_K: usize = 4;

/// Control-only cohort of 20 tumors generated from the first `k_true` of four
/// broad components, each carrying a 15% uniform floor.
pub fn selection_scenario(k_true: usize, seed: u64) -> Result<SynthSpec> {
    if k_true == 0 || k_true > SELECTION_MAX_K {
        return Err(Error::InvalidInput(format!(
            "k_true must be in 1..={SELECTION_MAX_K}, got {k_true}"
        )));
    }
    let b = BinningConfig::default();
    let floor = 0.15;
    let pool = [
        bump(&b, [0.5e-3, 0.6e-3], [0.15e-3, 0.15e-3], 0.50),
        bump(&b, [1.0e-3, 1.0e-3], [0.20e-3, 0.20e-3], 0.45),
        bump(&b, [1.5e-3, 1.6e-3], [0.20e-3, 0.20e-3], 0.50),
        bump(&b, [2.0e-3, 2.2e-3], [0.25e-3, 0.25e-3], 0.55),
    ];
    let control = pool[..k_true].iter().map(|p| with_uniform_floor(p, floor)).collect();
    Ok(SynthSpec {
        binning: b,
        control_pmfs: components(Phase::Control, control),
        treatment_pmfs: Vec::new(),
        cohort_sizes: (20, 0),
        counts_per_tumor: DEFAULT_COUNTS,
        quantity_dirichlet_alpha: vec![PRESET_MIXING_ALPHA; k_true],
        seed,
        contamination: None,
    })
}

/// Total-variation distance between two PMFs.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Greedy one-to-one matching of learned to true PMFs by smallest total
/// variation. Returns `(learned, truth, distance)` triples in matching order.
pub fn match_components(learned: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, l) in learned.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            pairs.push((i, j, total_variation(l, t)));
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_l = vec![false; learned.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (i, j, d) in pairs {
        if !used_l[i] && !used_t[j] {
            used_l[i] = true;
            used_t[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for (name, spec) in default_scenarios(3) {
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            generate(&spec).unwrap();
        }
        let l = lovo_like(0);
        assert_eq!((l.control_pmfs.len(), l.treatment_pmfs.len(), l.cohort_sizes), (3, 2, (8, 10)));
        let h = hct_like(0);
        assert_eq!((h.control_pmfs.len(), h.treatment_pmfs.len(), h.cohort_sizes), (4, 5, (13, 15)));
    }

    #[test]
    fn zero_counts_rejected() {
        let mut s = lovo_like(0);
        s.counts_per_tumor = 0.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = generate(&lovo_like(11)).unwrap();
        let b = generate(&lovo_like(11)).unwrap();
        assert_eq!(a, b);
        let c = generate(&lovo_like(12)).unwrap();
        assert_ne!(a.control, c.control);
    }

    #[test]
    fn bump_is_normalised() {
        let b = BinningConfig::default();
        let p = bump(&b, [1e-3, 2e-3], [0.1e-3, 0.2e-3], 0.4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let base: f64 = p.iter().step_by(2).sum();
        assert!((base - 0.4).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_recovers_permutation() {
        let t = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let l = vec![vec![0.0, 0.1, 0.9], vec![0.9, 0.1, 0.0], vec![0.05, 0.9, 0.05]];
        let mut m = match_components(&l, &t);
        m.sort_by_key(|t| t.0);
        let pairs: Vec<(usize, usize)> = m.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 0), (2, 1)]);
    }
}
