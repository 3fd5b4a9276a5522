//! Conventional whole-tumor summaries (volume, mean ADC, IQR) compared across
//! cohorts with Welch's t-test.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histograms::{Cohort, Histogram2D, Timepoint, N_TIMEPOINTS};
use crate::stats;

/// Per-timepoint summaries of one histogram, indexed by [`Timepoint::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub volume: [f64; N_TIMEPOINTS],
    pub mean_adc: [f64; N_TIMEPOINTS],
    pub iqr_adc: [f64; N_TIMEPOINTS],
}

/// Linearly interpolated quantile (sample positions `(n - 1) p`) of the
/// multiset in which bin center `centers[b]` appears `counts[b]` times.
fn binned_quantile(centers: &[f64], counts: &[u64], p: f64) -> f64 {
    let n: u64 = counts.iter().sum();
    let pos = (n - 1) as f64 * p;
    let lo = pos.floor() as u64;
    let frac = pos - lo as f64;
    let value_at = |rank: u64| {
        let mut seen = 0;
        for (c, &k) in centers.iter().zip(counts) {
            seen += k;
            if rank < seen {
                return *c;
            }
        }
        *centers.last().expect("non-empty grid")
    };
    let a = value_at(lo);
    if frac == 0.0 {
        a
    } else {
        a + frac * (value_at(lo + 1) - a)
    }
}

/// Volume, mean and interquartile range per timepoint, using bin centers.
pub fn summarise(h: &Histogram2D) -> Result<HistogramSummary> {
    h.validate()?;
    let centers: Vec<f64> = (0..h.binning.n_adc_bins).map(|b| h.binning.center(b)).collect();
    let mut s = HistogramSummary {
        volume: [0.0; N_TIMEPOINTS],
        mean_adc: [0.0; N_TIMEPOINTS],
        iqr_adc: [0.0; N_TIMEPOINTS],
    };
    for t in Timepoint::ALL {
        let col: Vec<u64> = h.counts.iter().map(|r| r[t.index()]).collect();
        let n: u64 = col.iter().sum();
        if n == 0 {
            return Err(Error::UndefinedSummary(format!(
                "histogram {} has no voxels at t = {}",
                h.tumor_id, t
            )));
        }
        let i = t.index();
        s.volume[i] = n as f64;
        s.mean_adc[i] = centers.iter().zip(&col).map(|(c, &k)| c * k as f64).sum::<f64>() / n as f64;
        s.iqr_adc[i] = binned_quantile(&centers, &col, 0.75) - binned_quantile(&centers, &col, 0.25);
    }
    Ok(s)
}

/// Followup minus baseline for each summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryChange {
    pub tumor_id: String,
    pub cohort: Cohort,
    pub d_volume: f64,
    pub d_mean_adc: f64,
    pub d_iqr_adc: f64,
}

pub fn summary_change(h: &Histogram2D) -> Result<SummaryChange> {
    let s = summarise(h)?;
    let (b, f) = (Timepoint::Baseline.index(), Timepoint::Followup.index());
    Ok(SummaryChange {
        tumor_id: h.tumor_id.clone(),
        cohort: h.cohort,
        d_volume: s.volume[f] - s.volume[b],
        d_mean_adc: s.mean_adc[f] - s.mean_adc[b],
        d_iqr_adc: s.iqr_adc[f] - s.iqr_adc[b],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub statistic: f64,
    pub dof: f64,
    pub p_two_tailed: f64,
    /// Normal deviate with the same two-tailed P, carrying the statistic's sign.
    pub z_equivalent: f64,
}

/// Welch's unequal-variance t-test of `treated` against `control`; a positive
/// statistic means the treated mean is larger.
pub fn welch_t_test(control: &[f64], treated: &[f64]) -> Result<TTestResult> {
    if control.len() < 2 || treated.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "t-test needs at least 2 values per group, got {} and {}",
            control.len(),
            treated.len()
        )));
    }
    if control.iter().chain(treated).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("t-test input contains non-finite values".into()));
    }
    let (n1, n2) = (control.len() as f64, treated.len() as f64);
    let (v1, v2) = (stats::sample_variance(control) / n1, stats::sample_variance(treated) / n2);
    let diff = stats::mean(treated) - stats::mean(control);
    if v1 + v2 == 0.0 {
        if diff == 0.0 {
            return Ok(TTestResult {
                statistic: 0.0,
                dof: n1 + n2 - 2.0,
                p_two_tailed: 1.0,
                z_equivalent: 0.0,
            });
        }
        return Err(Error::DegenerateVariance("both groups have zero variance".into()));
    }
    let statistic = diff / (v1 + v2).sqrt();
    let dof = (v1 + v2).powi(2) / (v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0));
    let p = stats::student_t_p_two_tailed(statistic, dof);
    Ok(TTestResult {
        statistic,
        dof,
        p_two_tailed: p,
        z_equivalent: statistic.signum() * stats::z_from_p_two_tailed(p),
    })
}

/// Root-sum-square of Z-scores from independent tests.
pub fn combine_z(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput("no tests to combine".into()));
    }
    Ok(z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

pub fn combine_tests(results: &[TTestResult]) -> Result<f64> {
    combine_z(&results.iter().map(|r| r.z_equivalent).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Volume,
    MeanAdc,
    IqrAdc,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Volume, Measure::MeanAdc, Measure::IqrAdc];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Volume => "volume",
            Measure::MeanAdc => "mean_adc",
            Measure::IqrAdc => "iqr_adc",
        }
    }

    fn of(self, c: &SummaryChange) -> f64 {
        match self {
            Measure::Volume => c.d_volume,
            Measure::MeanAdc => c.d_mean_adc,
            Measure::IqrAdc => c.d_iqr_adc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub changes: Vec<SummaryChange>,
    pub tests: Vec<(Measure, TTestResult)>,
    pub combined_z: f64,
}

impl BaselineReport {
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(|e| Error::io("<baseline csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["measure", "t_statistic", "dof", "p_two_tailed", "z_equivalent"])?;
        for (m, t) in &self.tests {
            w.write_record([
                m.name().to_string(),
                t.statistic.to_string(),
                t.dof.to_string(),
                t.p_two_tailed.to_string(),
                t.z_equivalent.to_string(),
            ])?;
        }
        w.write_record([
            "combined".to_string(),
            String::new(),
            String::new(),
            stats::p_two_tailed(self.combined_z).to_string(),
            self.combined_z.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io("<baseline csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), comment)
    }
}

/// Summaries of both cohorts, one t-test per measure and their combined Z.
pub fn baseline_analysis(control: &[Histogram2D], treated: &[Histogram2D]) -> Result<BaselineReport> {
    let c: Vec<SummaryChange> = control.iter().map(summary_change).collect::<Result<_>>()?;
    let t: Vec<SummaryChange> = treated.iter().map(summary_change).collect::<Result<_>>()?;
    let mut tests = Vec::new();
    for m in Measure::ALL {
        let cv: Vec<f64> = c.iter().map(|x| m.of(x)).collect();
        let tv: Vec<f64> = t.iter().map(|x| m.of(x)).collect();
        tests.push((m, welch_t_test(&cv, &tv)?));
    }
    let combined_z = combine_tests(&tests.iter().map(|(_, t)| *t).collect::<Vec<_>>())?;
    let mut changes = c;
    changes.extend(t);
    Ok(BaselineReport {
        changes,
        tests,
        combined_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histograms::BinningConfig;

    #[test]
    fn quantile_of_a_single_bin_is_its_center() {
        let centers = [1.0, 2.0, 3.0];
        assert_eq!(binned_quantile(&centers, &[0, 5, 0], 0.25), 2.0);
        assert_eq!(binned_quantile(&centers, &[0, 5, 0], 0.75), 2.0);
        // 1,1,2,3 -> positions 0.75 and 2.25
        assert!((binned_quantile(&centers, &[2, 1, 1], 0.25) - 1.0).abs() < 1e-15);
        assert!((binned_quantile(&centers, &[2, 1, 1], 0.75) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn empty_timepoint_is_undefined() {
        let mut h = Histogram2D::empty("x", Cohort::Control, BinningConfig::default());
        h.counts[3][0] = 10;
        assert!(matches!(summarise(&h), Err(Error::UndefinedSummary(_))));
    }

    #[test]
    fn identical_groups_give_zero_statistic() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_two_tailed, 1.0);
        assert_eq!(r.z_equivalent, 0.0);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        assert!(matches!(
            welch_t_test(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(welch_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn combine_single_is_identity() {
        assert_eq!(combine_z(&[4.0]).unwrap(), 4.0);
        assert_eq!(combine_z(&[-4.0]).unwrap(), 4.0);
        assert!(combine_z(&[]).is_err());
    }
}
