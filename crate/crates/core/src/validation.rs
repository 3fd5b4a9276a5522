//! Leave-one-out assessment of control tumors and outlier flagging.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::Histogram2D;
use crate::inference::{self, InferenceOptions, ResponseResult};
use crate::lpm::{self, LpmModel, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooOptions {
    pub n_control: usize,
    pub n_treatment: usize,
    pub train: TrainOptions,
    pub inference: InferenceOptions,
    /// Leave-one-out |z| at or above which a tumor can be flagged.
    pub threshold: f64,
}

impl LooOptions {
    pub fn new(n_control: usize, n_treatment: usize) -> Self {
        LooOptions {
            n_control,
            n_treatment,
            train: TrainOptions::default(),
            inference: InferenceOptions::default(),
            threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub tumor_id: String,
    pub leave_all_in: ResponseResult,
    /// `None` when the fold failed; see `failure`.
    pub leave_one_out: Option<ResponseResult>,
    pub failure: Option<String>,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub rows: Vec<LooRow>,
    /// `(tumor_id, reason)` for every flagged tumor.
    pub outlier_flags: Vec<(String, String)>,
    pub models_built: usize,
}

/// Trains both phases with fixed component counts.
pub fn train_full(control: &[Histogram2D], treated: &[Histogram2D], n_control: usize, n_treatment: usize, opts: &TrainOptions) -> Result<LpmModel> {
    let c = lpm::train_control(control, n_control, opts)?;
    Ok(lpm::train_treatment(&c.model, treated, n_treatment, opts)?.model)
}

fn is_outlier(lai: &ResponseResult, loo: &ResponseResult, threshold: f64) -> bool {
    loo.z.abs() >= threshold && loo.z > lai.z
}

/// Scores every control tumor with the full model and with a model retrained
/// without it. Flags tumors whose held-out |z| reaches the threshold and
/// exceeds the leave-all-in z. Flagged tumors are reported, never removed.
pub fn leave_one_out(control: &[Histogram2D], treated: &[Histogram2D], opts: &LooOptions) -> Result<LooReport> {
    if control.len() < 3 {
        return Err(Error::Precondition(format!(
            "leave-one-out needs at least 3 control tumors, got {}",
            control.len()
        )));
    }
    let full = train_full(control, treated, opts.n_control, opts.n_treatment, &opts.train)?;
    let lai = inference::control_consistency(&full, control, &opts.inference)?;

    let folds: Vec<Result<ResponseResult>> = (0..control.len())
        .into_par_iter()
        .map(|k| {
            let rest: Vec<Histogram2D> = control
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, h)| h.clone())
                .collect();
            let model = train_full(&rest, treated, opts.n_control, opts.n_treatment, &opts.train)?;
            Ok(inference::assess(&model, &control[k], &opts.inference)?.response)
        })
        .collect();

    let mut rows = Vec::with_capacity(control.len());
    let mut flags = Vec::new();
    for ((h, lai), fold) in control.iter().zip(lai).zip(folds) {
        let (loo, failure) = match fold {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let outlier = loo.as_ref().is_some_and(|l| is_outlier(&lai, l, opts.threshold));
        if outlier {
            let l = loo.as_ref().expect("flagged folds succeeded");
            flags.push((
                h.tumor_id.clone(),
                format!("leave-one-out z {:.2} exceeds leave-all-in z {:.2}", l.z, lai.z),
            ));
        }
        rows.push(LooRow {
            tumor_id: h.tumor_id.clone(),
            leave_all_in: lai,
            leave_one_out: loo,
            failure,
            outlier,
        });
    }
    Ok(LooReport {
        rows,
        outlier_flags: flags,
        models_built: models_built_count(control.len(), !treated.is_empty(), &[]) + 1,
    })
}

/// Trainings needed for a full analysis: one per selection candidate plus one
/// two-phase model per control fold when a treated cohort is present.
pub fn models_built_count(control_size: usize, treated_present: bool, sweep_sizes: &[usize]) -> usize {
    sweep_sizes.iter().sum::<usize>() + if treated_present { control_size } else { 0 }
}

impl LooReport {
    /// Effect and error columns are percentages.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(|e| Error::io("<loo csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "tumor_id",
            "z_lai",
            "z_loo",
            "p_lai",
            "p_loo",
            "effect_lai",
            "effect_loo",
            "err_lai",
            "err_loo",
            "outlier_flag",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let a = &r.leave_all_in;
            let l = r.leave_one_out.as_ref();
            w.write_record([
                r.tumor_id.clone(),
                a.z.to_string(),
                opt(l.map(|x| x.z)),
                a.p_two_tailed.to_string(),
                opt(l.map(|x| x.p_two_tailed)),
                (100.0 * a.effect_fraction).to_string(),
                opt(l.map(|x| 100.0 * x.effect_fraction)),
                (100.0 * a.effect_fraction_sigma).to_string(),
                opt(l.map(|x| 100.0 * x.effect_fraction_sigma)),
                r.outlier.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<loo csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), comment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_count_accounting() {
        assert_eq!(models_built_count(8, true, &[6, 4]), 18);
        assert_eq!(models_built_count(13, true, &[5, 6]), 24);
        assert_eq!(models_built_count(0, false, &[]), 0);
    }
}
