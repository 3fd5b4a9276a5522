//! Voxel ingestion, ADC estimation and paired-timepoint binning.
//!
//! A [`Histogram2D`] holds raw voxel counts on an `n_adc_bins x 2` grid; the
//! second axis is the acquisition timepoint (baseline, follow-up). Grids are
//! flattened row-major, so cell `bin * 2 + timepoint` is the canonical index
//! used throughout the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of timepoints on the second histogram axis.
pub const N_TIMEPOINTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Control,
    Treated,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cohort::Control => "control",
            Cohort::Treated => "treated",
        })
    }
}

impl FromStr for Cohort {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "control" => Ok(Cohort::Control),
            "treated" => Ok(Cohort::Treated),
            other => Err(format!("unknown cohort label {other:?}")),
        }
    }
}

/// Acquisition timepoint. Serialised as hours after treatment (`0` / `72`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timepoint {
    Baseline,
    Followup,
}

impl Timepoint {
    pub const ALL: [Timepoint; N_TIMEPOINTS] = [Timepoint::Baseline, Timepoint::Followup];

    pub fn index(self) -> usize {
        match self {
            Timepoint::Baseline => 0,
            Timepoint::Followup => 1,
        }
    }

    pub fn hours(self) -> u32 {
        match self {
            Timepoint::Baseline => 0,
            Timepoint::Followup => 72,
        }
    }
}

impl fmt::Display for Timepoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hours())
    }
}

impl FromStr for Timepoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "0" => Ok(Timepoint::Baseline),
            "72" => Ok(Timepoint::Followup),
            other => Err(format!("unknown timepoint label {other:?}")),
        }
    }
}

/// One segmented voxel with its ADC value in mm²/s.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRecord {
    pub tumor_id: String,
    pub cohort: Cohort,
    pub timepoint: Timepoint,
    pub adc: f64,
}

impl VoxelRecord {
    pub fn new(tumor_id: impl Into<String>, cohort: Cohort, timepoint: Timepoint, adc: f64) -> Result<Self> {
        if !(adc.is_finite() && adc > 0.0) {
            return Err(Error::InvalidInput(format!("adc must be finite and positive, got {adc}")));
        }
        Ok(VoxelRecord {
            tumor_id: tumor_id.into(),
            cohort,
            timepoint,
            adc,
        })
    }
}

/// Raw diffusion-weighted signal for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    /// s/mm²
    pub b_values: Vec<f64>,
    pub signals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcFit {
    /// Apparent diffusion coefficient, mm²/s.
    pub adc: f64,
    /// Extrapolated signal at b = 0.
    pub s0: f64,
}

/// Fits `S = S0 exp(-b D)` by ordinary least squares on `ln S`.
pub fn fit_adc(record: &SignalRecord) -> Result<AdcFit> {
    let SignalRecord { b_values, signals } = record;
    if b_values.len() != signals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} b-values but {} signals",
            b_values.len(),
            signals.len()
        )));
    }
    if let Some((&b, &signal)) = b_values
        .iter()
        .zip(signals)
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(Error::NonPositiveSignal { b, signal });
    }
    let mut distinct: Vec<f64> = b_values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateDesign {
            distinct: distinct.len(),
        });
    }

    let n = b_values.len() as f64;
    let b_mean = b_values.iter().sum::<f64>() / n;
    let log_s: Vec<f64> = signals.iter().map(|s| s.ln()).collect();
    let y_mean = log_s.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (b, y) in b_values.iter().zip(&log_s) {
        sxy += (b - b_mean) * (y - y_mean);
        sxx += (b - b_mean) * (b - b_mean);
    }
    let slope = sxy / sxx;
    Ok(AdcFit {
        adc: -slope,
        s0: (y_mean - slope * b_mean).exp(),
    })
}

/// Uniform ADC grid shared by every histogram and component of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub adc_min: f64,
    pub adc_max: f64,
    pub n_adc_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            adc_min: 0.0,
            adc_max: 3.0e-3,
            n_adc_bins: 32,
        }
    }
}

impl BinningConfig {
    pub fn new(adc_min: f64, adc_max: f64, n_adc_bins: usize) -> Result<Self> {
        let config = BinningConfig {
            adc_min,
            adc_max,
            n_adc_bins,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adc_min.is_finite() && self.adc_max.is_finite() && self.adc_min < self.adc_max) {
            return Err(Error::InvalidInput(format!(
                "binning range [{}, {}) is empty or non-finite",
                self.adc_min, self.adc_max
            )));
        }
        if self.n_adc_bins < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 ADC bins, got {}",
                self.n_adc_bins
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.adc_max - self.adc_min) / self.n_adc_bins as f64
    }

    pub fn n_cells(&self) -> usize {
        self.n_adc_bins * N_TIMEPOINTS
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.adc_min + (bin as f64 + 0.5) * self.width()
    }

    /// Bin for `adc`, or `None` when it falls outside the grid. Intervals are
    /// half-open except the last, which includes `adc_max`.
    pub fn bin_index(&self, adc: f64) -> Option<usize> {
        if !(adc >= self.adc_min && adc <= self.adc_max) {
            return None;
        }
        let scaled = (adc - self.adc_min) / (self.adc_max - self.adc_min) * self.n_adc_bins as f64;
        Some((scaled.floor() as usize).min(self.n_adc_bins - 1))
    }
}

/// Flattened cell index of `(bin, timepoint)`.
pub fn cell_index(bin: usize, timepoint: Timepoint) -> usize {
    bin * N_TIMEPOINTS + timepoint.index()
}

/// Voxel counts over (ADC bin x timepoint) for one tumor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub tumor_id: String,
    pub cohort: Cohort,
    pub binning: BinningConfig,
    /// `counts[bin][timepoint]`
    pub counts: Vec<[u64; N_TIMEPOINTS]>,
    /// Voxels whose ADC fell outside the grid.
    #[serde(default)]
    pub overflow: u64,
}

impl Histogram2D {
    pub fn empty(tumor_id: impl Into<String>, cohort: Cohort, binning: BinningConfig) -> Self {
        Histogram2D {
            tumor_id: tumor_id.into(),
            cohort,
            binning,
            counts: vec![[0; N_TIMEPOINTS]; binning.n_adc_bins],
            overflow: 0,
        }
    }

    /// Builds a histogram from a flattened row-major cell vector.
    pub fn from_cells(tumor_id: impl Into<String>, cohort: Cohort, binning: BinningConfig, cells: &[u64]) -> Result<Self> {
        if cells.len() != binning.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a grid of {}",
                cells.len(),
                binning.n_cells()
            )));
        }
        let counts = cells.chunks_exact(N_TIMEPOINTS).map(|c| [c[0], c[1]]).collect();
        Ok(Histogram2D {
            tumor_id: tumor_id.into(),
            cohort,
            binning,
            counts,
            overflow: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if self.counts.len() != self.binning.n_adc_bins {
            return Err(Error::ShapeMismatch(format!(
                "histogram {} has {} rows, binning declares {}",
                self.tumor_id,
                self.counts.len(),
                self.binning.n_adc_bins
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn column_total(&self, timepoint: Timepoint) -> u64 {
        self.counts.iter().map(|row| row[timepoint.index()]).sum()
    }

    /// Counts as a flattened `f64` vector in canonical cell order.
    pub fn cells(&self) -> Vec<f64> {
        self.counts.iter().flatten().map(|&c| c as f64).collect()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json_string()?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let h: Histogram2D = serde_json::from_reader(BufReader::new(file))?;
        h.validate()?;
        Ok(h)
    }
}

/// Output of [`bin_voxels`].
#[derive(Debug, Clone, Default)]
pub struct BinnedCohort {
    pub histograms: BTreeMap<String, Histogram2D>,
    pub warnings: Vec<String>,
}

/// Bins voxel records into one [`Histogram2D`] per tumor. Out-of-range voxels
/// go to the per-tumor `overflow` tally.
pub fn bin_voxels(records: &[VoxelRecord], config: &BinningConfig) -> Result<BinnedCohort> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput("no voxel records".into()));
    }
    let mut histograms: BTreeMap<String, Histogram2D> = BTreeMap::new();
    for record in records {
        let h = histograms
            .entry(record.tumor_id.clone())
            .or_insert_with(|| Histogram2D::empty(record.tumor_id.clone(), record.cohort, *config));
        if h.cohort != record.cohort {
            return Err(Error::InvalidInput(format!(
                "tumor {} labelled both {} and {}",
                record.tumor_id, h.cohort, record.cohort
            )));
        }
        match config.bin_index(record.adc) {
            Some(bin) => h.counts[bin][record.timepoint.index()] += 1,
            None => h.overflow += 1,
        }
    }
    let mut warnings = Vec::new();
    for h in histograms.values() {
        for tp in Timepoint::ALL {
            if h.column_total(tp) == 0 {
                warnings.push(format!("tumor {} has no in-range voxels at t={}", h.tumor_id, tp));
            }
        }
    }
    Ok(BinnedCohort {
        histograms,
        warnings,
    })
}

/// A data row that could not be loaded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct VoxelLoad {
    pub records: Vec<VoxelRecord>,
    pub rejected: Vec<RejectedRow>,
}

pub const VOXEL_CSV_HEADER: [&str; 4] = ["tumor_id", "cohort", "timepoint", "adc"];
pub const SIGNAL_CSV_HEADER: [&str; 6] = ["tumor_id", "cohort", "timepoint", "voxel_id", "b", "signal"];

fn open_csv(path: &Path, required: &[&str]) -> Result<(csv::Reader<BufReader<File>>, Vec<usize>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let mut columns = Vec::with_capacity(required.len());
    let mut missing = Vec::new();
    for name in required {
        match headers.iter().position(|h| h == *name) {
            Some(i) => columns.push(i),
            None => missing.push(*name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: missing column(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok((reader, columns))
}

fn parse_positive(field: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .parse()
        .map_err(|_| format!("{name} {field:?} is not a number"))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(format!("{name} {field:?} must be finite and positive"));
    }
    Ok(v)
}

/// Loads a voxel CSV (`tumor_id,cohort,timepoint,adc`). Malformed rows are
/// collected in [`VoxelLoad::rejected`]; a missing column is a hard error.
pub fn load_voxel_csv(path: &Path) -> Result<VoxelLoad> {
    let (mut reader, cols) = open_csv(path, &VOXEL_CSV_HEADER)?;
    let mut out = VoxelLoad::default();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let parsed = (|| {
            let field = |i: usize| row.get(cols[i]).ok_or_else(|| "short row".to_string());
            let tumor_id = field(0)?;
            if tumor_id.is_empty() {
                return Err("empty tumor_id".to_string());
            }
            let cohort: Cohort = field(1)?.parse()?;
            let timepoint: Timepoint = field(2)?.parse()?;
            let adc = parse_positive(field(3)?, "adc")?;
            Ok(VoxelRecord {
                tumor_id: tumor_id.to_string(),
                cohort,
                timepoint,
                adc,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok(out)
}

pub fn write_voxel_csv(path: &Path, records: &[VoxelRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(VOXEL_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.tumor_id.as_str(),
            &r.cohort.to_string(),
            &r.timepoint.to_string(),
            &r.adc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a raw-signal CSV, groups rows per voxel and fits an ADC for each.
/// Voxels whose fit fails or yields a non-positive ADC are rejected and
/// reported against the line of their first row.
pub fn load_signal_csv(path: &Path) -> Result<VoxelLoad> {
    let (mut reader, cols) = open_csv(path, &SIGNAL_CSV_HEADER)?;
    type Key = (String, Cohort, Timepoint, String);
    let mut groups: BTreeMap<Key, (u64, SignalRecord)> = BTreeMap::new();
    let mut out = VoxelLoad::default();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let parsed = (|| {
            let field = |i: usize| row.get(cols[i]).ok_or_else(|| "short row".to_string());
            let tumor_id = field(0)?.to_string();
            if tumor_id.is_empty() {
                return Err("empty tumor_id".to_string());
            }
            let cohort: Cohort = field(1)?.parse()?;
            let timepoint: Timepoint = field(2)?.parse()?;
            let voxel_id = field(3)?.to_string();
            let b: f64 = field(4)?
                .parse()
                .map_err(|_| format!("b {:?} is not a number", field(4).unwrap_or_default()))?;
            if !(b.is_finite() && b >= 0.0) {
                return Err(format!("b = {b} must be finite and non-negative"));
            }
            let signal = parse_positive(field(5)?, "signal")?;
            Ok(((tumor_id, cohort, timepoint, voxel_id), b, signal))
        })();
        match parsed {
            Ok((key, b, signal)) => {
                let entry = groups.entry(key).or_insert_with(|| {
                    (
                        line,
                        SignalRecord {
                            b_values: Vec::new(),
                            signals: Vec::new(),
                        },
                    )
                });
                entry.1.b_values.push(b);
                entry.1.signals.push(signal);
            }
            Err(reason) => out.rejected.push(RejectedRow { line, reason }),
        }
    }
    for ((tumor_id, cohort, timepoint, voxel_id), (line, signal)) in groups {
        match fit_adc(&signal) {
            Ok(fit) if fit.adc.is_finite() && fit.adc > 0.0 => out.records.push(VoxelRecord {
                tumor_id,
                cohort,
                timepoint,
                adc: fit.adc,
            }),
            Ok(fit) => out.rejected.push(RejectedRow {
                line,
                reason: format!("voxel {voxel_id}: fitted ADC {} is not positive", fit.adc),
            }),
            Err(e) => out.rejected.push(RejectedRow {
                line,
                reason: format!("voxel {voxel_id}: {e}"),
            }),
        }
    }
    out.rejected.sort_by_key(|r| r.line);
    Ok(out)
}

/// One voxel per count, placed at its bin center. Re-binning the result with
/// the same grid reproduces `h` exactly.
pub fn voxels_from_histogram(h: &Histogram2D) -> Vec<VoxelRecord> {
    let mut out = Vec::with_capacity(h.total() as usize);
    for tp in Timepoint::ALL {
        for (bin, row) in h.counts.iter().enumerate() {
            let adc = h.binning.center(bin);
            for _ in 0..row[tp.index()] {
                out.push(VoxelRecord {
                    tumor_id: h.tumor_id.clone(),
                    cohort: h.cohort,
                    timepoint: tp,
                    adc,
                });
            }
        }
    }
    out
}

/// Writes `text` followed by a newline, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| if text.ends_with('\n') { Ok(()) } else { w.write_all(b"\n") })
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
