//! Run configuration: a flat `key = value` file, `--set` overrides and flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lpm_core::inference::{CovarianceScaling, InferenceOptions};
use lpm_core::lpm::Convergence;
use lpm_core::selection::SelectionOptions;
use lpm_core::synth::Contamination;
use lpm_core::{BinningConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::InputError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    PerHistogram,
    Training,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub adc_min: f64,
    pub adc_max: f64,
    pub n_adc_bins: usize,

    pub restarts: usize,
    pub max_iter: usize,
    pub tolerance: f64,
    pub convergence: Convergence,
    pub init_concentration: f64,
    pub degeneracy_threshold: f64,
    pub residual_init: bool,

    pub n_control: Option<usize>,
    pub n_treatment: Option<usize>,

    pub control_k_min: usize,
    pub control_k_max: usize,
    /// Counts of components added on top of the control model.
    pub treatment_k_min: usize,
    pub treatment_k_max: usize,
    pub tie_tolerance: f64,
    pub loo_diagnostic: bool,

    pub covariance_scaling: Scaling,
    pub loo_threshold: f64,

    pub preset: String,
    pub contaminate_tumor: Option<usize>,
    pub contaminate_fraction: f64,
    pub contaminate_component: usize,

    pub emit_json: bool,
    pub emit_csv: bool,
    pub emit_svg: bool,

    // Locations. Not part of the config hash.
    pub input: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
}

const LOCATION_KEYS: [&str; 3] = ["input", "model", "out_dir"];

impl Default for RunConfig {
    fn default() -> Self {
        let b = BinningConfig::default();
        let t = TrainOptions::default();
        let s = SelectionOptions::default();
        RunConfig {
            seed: 0,
            adc_min: b.adc_min,
            adc_max: b.adc_max,
            n_adc_bins: b.n_adc_bins,
            restarts: t.restarts,
            max_iter: t.max_iter,
            tolerance: t.tolerance,
            convergence: t.convergence,
            init_concentration: t.init_concentration,
            degeneracy_threshold: t.degeneracy_threshold,
            residual_init: t.residual_init,
            n_control: None,
            n_treatment: None,
            control_k_min: 1,
            control_k_max: 6,
            treatment_k_min: 1,
            treatment_k_max: 4,
            tie_tolerance: s.tie_tolerance,
            loo_diagnostic: s.loo_diagnostic,
            covariance_scaling: Scaling::PerHistogram,
            loo_threshold: 2.0,
            preset: "lovo_like".into(),
            contaminate_tumor: None,
            contaminate_fraction: 0.3,
            contaminate_component: 0,
            emit_json: true,
            emit_csv: true,
            emit_svg: true,
            input: Vec::new(),
            model: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides, then deserialises.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| InputError(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| InputError(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| InputError(format!("override {o:?} is not key=value")))?;
            let value = parse_value(value.trim());
            table.insert(key.trim().to_string(), value);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| InputError(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn binning(&self) -> Result<BinningConfig> {
        Ok(BinningConfig::new(self.adc_min, self.adc_max, self.n_adc_bins)?)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let t = TrainOptions {
            seed: self.seed,
            restarts: self.restarts,
            max_iter: self.max_iter,
            tolerance: self.tolerance,
            convergence: self.convergence,
            init_concentration: self.init_concentration,
            degeneracy_threshold: self.degeneracy_threshold,
            residual_init: self.residual_init,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn selection_options(&self) -> Result<SelectionOptions> {
        Ok(SelectionOptions {
            train: self.train_options()?,
            tie_tolerance: self.tie_tolerance,
            loo_diagnostic: self.loo_diagnostic,
        })
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            scaling: match self.covariance_scaling {
                Scaling::PerHistogram => CovarianceScaling::PerHistogram,
                Scaling::Training => CovarianceScaling::Training,
                Scaling::None => CovarianceScaling::None,
            },
            seed: self.seed,
        }
    }

    pub fn contamination(&self) -> Option<Contamination> {
        self.contaminate_tumor.map(|tumor| Contamination {
            tumor,
            fraction: self.contaminate_fraction,
            treatment_component: self.contaminate_component,
        })
    }

    /// SHA-256 of the analysis settings as compact JSON, in hex.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            for k in LOCATION_KEYS {
                map.remove(k);
            }
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        for p in self.input.iter().chain(&self.model) {
            if !p.exists() {
                return Err(InputError(format!("input {} does not exist", p.display()))).context("checking inputs");
            }
        }
        Ok(())
    }
}

/// Interprets an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::load(None, &["seed=7".into(), "preset=hct_like".into(), "tolerance=1e-6".into()]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.preset, "hct_like");
        assert_eq!(c.tolerance, 1e-6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["sede=7".into()]).is_err());
    }

    #[test]
    fn hash_ignores_locations() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.input.push("x".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
