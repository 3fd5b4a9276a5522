use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lpm_core::baseline::{self, BaselineReport};
use lpm_core::histograms::{self, VoxelLoad, VOXEL_CSV_HEADER};
use lpm_core::inference::{self, CohortSummary, ResponseResult};
use lpm_core::lpm::{self, TrainOutput};
use lpm_core::selection::{self, ParameterCount, SelectionCurve};
use lpm_core::validation::{self, LooOptions, LooReport};
use lpm_core::{svg, synth, Cohort, Error, Histogram2D, LpmModel, Phase};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{Artifacts, Provenance};
use crate::InputError;

/// Histograms from files and directories (every `*.json` inside, by name).
pub fn load_histograms(paths: &[PathBuf]) -> Result<(Vec<Histogram2D>, Vec<Histogram2D>)> {
    if paths.is_empty() {
        return Err(InputError("no histogram inputs given".into()).into());
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    let mut seen = BTreeSet::new();
    let (mut control, mut treated) = (Vec::new(), Vec::new());
    for f in files {
        let h = Histogram2D::read_json(&f).with_context(|| format!("reading histogram {}", f.display()))?;
        if !seen.insert(h.tumor_id.clone()) {
            return Err(InputError(format!("duplicate tumor id {} in {}", h.tumor_id, f.display())).into());
        }
        match h.cohort {
            Cohort::Control => control.push(h),
            Cohort::Treated => treated.push(h),
        }
    }
    log::info!("loaded {} control and {} treated histograms", control.len(), treated.len());
    Ok((control, treated))
}

fn file_stem(tumor_id: &str) -> String {
    tumor_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_histograms(out: &Artifacts, hists: &[&Histogram2D]) -> Result<()> {
    let dir = out.ensure_dir(Some("histograms"))?;
    let mut names = BTreeSet::new();
    for h in hists {
        let name = format!("{}.json", file_stem(&h.tumor_id));
        if !names.insert(name.clone()) {
            bail!(InputError(format!("tumor ids collide on file name {name}")));
        }
        out.write_json(&dir.join(name), h)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TumorTally {
    tumor_id: String,
    cohort: Cohort,
    in_range: u64,
    overflow: u64,
}

#[derive(Serialize)]
struct IngestSummary {
    inputs: Vec<String>,
    records: usize,
    rejected: Vec<RejectedAt>,
    tumors: Vec<TumorTally>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct RejectedAt {
    file: String,
    line: u64,
    reason: String,
}

/// Artifacts name inputs without their directory so output does not depend on location.
fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn ingest(cfg: &RunConfig, out: &Artifacts, signal: bool) -> Result<()> {
    if cfg.input.is_empty() {
        bail!(InputError("ingest needs at least one CSV input".into()));
    }
    let binning = cfg.binning()?;
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for p in &cfg.input {
        let VoxelLoad { records: r, rejected: bad } = if signal {
            histograms::load_signal_csv(p)
        } else {
            histograms::load_voxel_csv(p)
        }
        .with_context(|| format!("loading {}", p.display()))?;
        for b in bad {
            log::warn!("{}:{}: {}", p.display(), b.line, b.reason);
            rejected.push(RejectedAt {
                file: file_name(p),
                line: b.line,
                reason: b.reason,
            });
        }
        records.extend(r);
    }
    let binned = histograms::bin_voxels(&records, &binning)?;
    for w in &binned.warnings {
        log::warn!("{w}");
    }
    out.ensure_dir(None)?;
    write_histograms(out, &binned.histograms.values().collect::<Vec<_>>())?;
    let summary = IngestSummary {
        inputs: cfg.input.iter().map(|p| file_name(p)).collect(),
        records: records.len(),
        rejected,
        tumors: binned
            .histograms
            .values()
            .map(|h| TumorTally {
                tumor_id: h.tumor_id.clone(),
                cohort: h.cohort,
                in_range: h.total(),
                overflow: h.overflow,
            })
            .collect(),
        warnings: binned.warnings.clone(),
    };
    out.write_json(&out.path("ingest_summary.json"), &summary)?;
    eprintln!(
        "ingested {} voxels into {} histograms; {} rows rejected",
        summary.records,
        summary.tumors.len(),
        summary.rejected.len()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Artifacts, voxels: bool) -> Result<()> {
    let mut spec = synth::preset(&cfg.preset, cfg.seed).ok_or_else(|| {
        InputError(format!("unknown preset {:?} (expected lovo_like or hct_like)", cfg.preset))
    })?;
    spec.contamination = cfg.contamination();
    let data = synth::generate(&spec)?;
    out.ensure_dir(None)?;
    let all: Vec<&Histogram2D> = data.control.iter().chain(&data.treated).collect();
    write_histograms(out, &all)?;
    out.write_json(&out.path("truth.json"), &data.truth)?;
    out.write_json(&out.path("synth_spec.json"), &spec)?;
    if voxels {
        let path = out.path("voxels.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "# config_hash={} seed={}", out.provenance.config_hash, out.provenance.seed)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(VOXEL_CSV_HEADER)?;
        for h in &all {
            for r in histograms::voxels_from_histogram(h) {
                w.write_record([
                    r.tumor_id.as_str(),
                    &r.cohort.to_string(),
                    &r.timepoint.to_string(),
                    &r.adc.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    eprintln!(
        "generated {} control and {} treated histograms from {}",
        data.control.len(),
        data.treated.len(),
        cfg.preset
    );
    Ok(())
}

#[derive(Serialize)]
struct PhaseSummary {
    phase: Phase,
    n_histograms: usize,
    n_components: usize,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
    degenerate: bool,
    monotone_violations: usize,
    chi2_per_dof: f64,
    dof: usize,
}

fn phase_summary(phase: Phase, cohort: &[Histogram2D], t: &TrainOutput, trainable: usize) -> Result<PhaseSummary> {
    let gof = selection::chi2_per_dof(cohort, &t.model, &t.quantities, ParameterCount::training(trainable))?;
    Ok(PhaseSummary {
        phase,
        n_histograms: cohort.len(),
        n_components: t.model.n_components(),
        log_likelihood: t.diagnostics.log_likelihood,
        iterations: t.diagnostics.n_iterations,
        converged: t.diagnostics.converged,
        degenerate: t.degenerate,
        monotone_violations: t.monotone_violations,
        chi2_per_dof: gof.chi2_per_dof,
        dof: gof.dof,
    })
}

fn require(v: Option<usize>, name: &str) -> Result<usize> {
    v.ok_or_else(|| InputError(format!("{name} is required (flag or config key)")).into())
}

pub fn train(cfg: &RunConfig, out: &Artifacts) -> Result<()> {
    let (control, treated) = load_histograms(&cfg.input)?;
    let n_c = require(cfg.n_control, "n_control")?;
    let n_t = cfg.n_treatment.unwrap_or(0);
    let opts = cfg.train_options()?;
    let c = lpm::train_control(&control, n_c, &opts)?;
    let mut phases = vec![phase_summary(Phase::Control, &control, &c, n_c)?];
    let mut model = c.model;
    if n_t > 0 {
        let t = lpm::train_treatment(&model, &treated, n_t, &opts)?;
        phases.push(phase_summary(Phase::Treatment, &treated, &t, n_t)?);
        model = t.model;
    }
    model.training_meta.chi2_per_dof = phases.last().map(|p| p.chi2_per_dof);
    out.ensure_dir(None)?;
    out.write_json(&out.path("model.json"), &model)?;
    out.json("training.json", &serde_json::json!({ "phases": phases }))?;
    for p in &phases {
        eprintln!(
            "{} phase: {} components, chi2/dof {:.3}, {} iterations{}",
            p.phase,
            p.n_components,
            p.chi2_per_dof,
            p.iterations,
            if p.degenerate { ", DEGENERATE" } else { "" }
        );
    }
    Ok(())
}

fn write_curve(out: &Artifacts, curve: &SelectionCurve) -> Result<()> {
    let stem = format!("selection_{}", curve.phase);
    out.csv(&format!("{stem}.csv"), |w, c| curve.write_csv(w, Some(c)))?;
    out.json(&format!("{stem}.json"), curve)?;
    out.svg(&format!("{stem}.svg"), &svg::selection_curve(curve))
}

/// Runs a sweep, writing the curve even when every candidate failed.
fn sweep(
    out: &Artifacts,
    cohort: &[Histogram2D],
    phase: Phase,
    base: Option<&LpmModel>,
    range: (usize, usize),
    opts: &selection::SelectionOptions,
) -> Result<selection::SelectionOutput> {
    match selection::select_components(cohort, phase, base, range.0, range.1, opts) {
        Ok(s) => {
            for (k, why) in &s.skipped {
                log::warn!("{phase} candidate K = {k} skipped: {why}");
            }
            write_curve(out, &s.curve)?;
            eprintln!("{phase} phase: chose K = {}", s.curve.chosen);
            Ok(s)
        }
        Err(Error::SelectionFailed { curve }) => {
            write_curve(out, &curve)?;
            Err(Error::SelectionFailed { curve }.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    Control,
    Treatment,
    Both,
}

pub fn select(cfg: &RunConfig, out: &Artifacts, phase: PhaseArg) -> Result<()> {
    let (control, treated) = load_histograms(&cfg.input)?;
    let opts = cfg.selection_options()?;
    out.ensure_dir(None)?;
    let control_model = match phase {
        PhaseArg::Treatment => {
            let path = cfg
                .model
                .as_ref()
                .ok_or_else(|| InputError("treatment selection needs --model with a control model".into()))?;
            LpmModel::read_json(path)
                .with_context(|| format!("reading model {}", path.display()))?
                .control_only()
        }
        _ => {
            let s = sweep(out, &control, Phase::Control, None, (cfg.control_k_min, cfg.control_k_max), &opts)?;
            out.write_json(&out.path("model_control.json"), &s.best.model)?;
            s.best.model
        }
    };
    if phase == PhaseArg::Control {
        return Ok(());
    }
    let k = control_model.n_control;
    let range = (k + cfg.treatment_k_min, k + cfg.treatment_k_max);
    let s = sweep(out, &treated, Phase::Treatment, Some(&control_model), range, &opts)?;
    out.write_json(&out.path("model.json"), &s.best.model)
}

fn load_model(cfg: &RunConfig) -> Result<LpmModel> {
    let path = cfg.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.json"));
    if !path.exists() {
        bail!(InputError(format!("model {} does not exist", path.display())));
    }
    LpmModel::read_json(&path).with_context(|| format!("reading model {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TumorFit {
    pub tumor_id: String,
    pub cohort: Cohort,
    pub quantities: Vec<f64>,
    pub chi2_per_dof: f64,
    pub converged: bool,
    pub response: ResponseResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub n_control: usize,
    pub n_treatment: usize,
    pub treated: Option<CohortSummary>,
    pub control: Vec<ResponseResult>,
    pub tumors: Vec<TumorFit>,
}

pub fn fit(cfg: &RunConfig, out: &Artifacts) -> Result<()> {
    let model = load_model(cfg)?;
    let (control, treated) = load_histograms(&cfg.input)?;
    let opts = cfg.inference_options();
    let mut tumors = Vec::new();
    for h in control.iter().chain(&treated) {
        model.check_binning(h)?;
        let a = inference::assess(&model, h, &opts).with_context(|| format!("assessing {}", h.tumor_id))?;
        if !a.diagnostics.converged {
            log::warn!("quantity fit for {} did not converge", h.tumor_id);
        }
        tumors.push(TumorFit {
            tumor_id: h.tumor_id.clone(),
            cohort: h.cohort,
            quantities: a.quantities.0,
            chi2_per_dof: a.fit.chi2_per_dof,
            converged: a.diagnostics.converged,
            response: a.response,
        });
    }
    let pick = |c: Cohort| -> Vec<ResponseResult> {
        tumors.iter().filter(|t| t.cohort == c).map(|t| t.response.clone()).collect()
    };
    let treated_results = pick(Cohort::Treated);
    let control_results = pick(Cohort::Control);
    let summary = if treated_results.is_empty() {
        None
    } else {
        Some(inference::combine_cohort(&treated_results)?)
    };
    out.ensure_dir(None)?;
    if let Some(s) = &summary {
        out.csv("response_treated.csv", |w, c| s.write_csv(w, Some(c)))?;
        eprintln!("treated cohort combined Z {:.2} (p = {:.3e})", s.combined_z, s.combined_p);
    }
    if !control_results.is_empty() {
        let s = inference::combine_cohort(&control_results)?;
        out.csv("response_control.csv", |w, c| s.write_csv(w, Some(c)))?;
    }
    let report = FitReport {
        n_control: model.n_control,
        n_treatment: model.n_treatment,
        treated: summary,
        control: control_results,
        tumors,
    };
    // The report command reads this back, so it is written regardless of emit flags.
    out.write_json(&out.path("response.json"), &report)
}

pub fn validate(cfg: &RunConfig, out: &Artifacts) -> Result<()> {
    let (control, treated) = load_histograms(&cfg.input)?;
    let from_model = match &cfg.model {
        Some(_) => Some(load_model(cfg)?),
        None => None,
    };
    let n_c = cfg.n_control.or(from_model.as_ref().map(|m| m.n_control));
    let n_t = cfg.n_treatment.or(from_model.as_ref().map(|m| m.n_treatment));
    let mut opts = LooOptions::new(require(n_c, "n_control")?, require(n_t, "n_treatment")?);
    opts.train = cfg.train_options()?;
    opts.inference = cfg.inference_options();
    opts.threshold = cfg.loo_threshold;
    let report = validation::leave_one_out(&control, &treated, &opts)?;
    out.ensure_dir(None)?;
    out.csv("loo.csv", |w, c| report.write_csv(w, Some(c)))?;
    out.write_json(&out.path("loo.json"), &report)?;
    for r in &report.rows {
        if let Some(f) = &r.failure {
            log::warn!("fold {} failed: {f}", r.tumor_id);
        }
    }
    for (id, why) in &report.outlier_flags {
        eprintln!("outlier: {id}: {why}");
    }
    eprintln!("{} models built, {} tumors flagged", report.models_built, report.outlier_flags.len());
    Ok(())
}

pub fn baseline(cfg: &RunConfig, out: &Artifacts) -> Result<()> {
    let (control, treated) = load_histograms(&cfg.input)?;
    let report = baseline::baseline_analysis(&control, &treated)?;
    out.ensure_dir(None)?;
    out.csv("baseline.csv", |w, c| report.write_csv(w, Some(c)))?;
    out.write_json(&out.path("baseline.json"), &report)?;
    eprintln!("baseline combined Z {:.2}", report.combined_z);
    Ok(())
}

#[derive(Deserialize)]
struct Stamp {
    provenance: Option<Provenance>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, Option<Provenance>)> {
    let text = std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
    let value: T = serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    let stamp: Stamp = serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    Ok((value, stamp.provenance))
}

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<(T, Option<Provenance>)>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn bars(results: &[ResponseResult]) -> Vec<(String, f64, f64)> {
    results
        .iter()
        .map(|r| (r.tumor_id.clone(), 100.0 * r.effect_fraction, 100.0 * r.effect_fraction_sigma))
        .collect()
}

fn response_table(s: &mut String, results: &[ResponseResult]) {
    let _ = writeln!(s, "| tumor | effect % | error % | Z | P |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|");
    for r in results {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.3e} |",
            r.tumor_id,
            100.0 * r.effect_fraction,
            100.0 * r.effect_fraction_sigma,
            r.z,
            r.p_two_tailed
        );
    }
}

/// Assembles prior outputs in `from` into `report.md` and charts. Nothing is recomputed.
pub fn report(out: &Artifacts, from: &Path) -> Result<()> {
    let model_path = from.join("model.json");
    if !model_path.exists() {
        bail!(InputError(format!("{} not found; run train or select first", model_path.display())));
    }
    let model = LpmModel::read_json(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let model_stamp = read_json::<serde_json::Value>(&model_path)?.1;
    let response_path = from.join("response.json");
    if !response_path.exists() {
        bail!(InputError(format!("{} not found; run fit first", response_path.display())));
    }
    let (fit, fit_stamp): (FitReport, _) = read_json(&response_path)?;
    let baseline: Option<(BaselineReport, _)> = optional(&from.join("baseline.json"))?;
    let loo: Option<(LooReport, _)> = optional(&from.join("loo.json"))?;
    let curves: Vec<(SelectionCurve, Option<Provenance>)> = ["control", "treatment"]
        .iter()
        .filter_map(|p| optional(&from.join(format!("selection_{p}.json"))).transpose())
        .collect::<Result<_>>()?;

    let mut s = String::new();
    let _ = writeln!(s, "# Treatment response report\n");
    let _ = writeln!(s, "## Inputs\n");
    let stamp = |p: &Option<Provenance>| {
        p.as_ref()
            .map(|p| format!("config {} seed {}", &p.config_hash[..12.min(p.config_hash.len())], p.seed))
            .unwrap_or_else(|| "unstamped".into())
    };
    let _ = writeln!(s, "- model.json: {}", stamp(&model_stamp));
    let _ = writeln!(s, "- response.json: {}", stamp(&fit_stamp));
    if let Some((_, p)) = &baseline {
        let _ = writeln!(s, "- baseline.json: {}", stamp(p));
    }
    if let Some((_, p)) = &loo {
        let _ = writeln!(s, "- loo.json: {}", stamp(p));
    }

    let _ = writeln!(s, "\n## Model\n");
    let _ = writeln!(
        s,
        "{} control and {} treatment components on {} ADC bins [{:e}, {:e}] mm^2/s.",
        model.n_control, model.n_treatment, model.binning.n_adc_bins, model.binning.adc_min, model.binning.adc_max
    );
    if let Some(c) = model.training_meta.chi2_per_dof {
        let _ = writeln!(s, "Training chi2/dof {c:.3}.");
    }
    if model.is_degenerate() {
        let _ = writeln!(s, "\nWARNING: a training phase ended with a collapsed component.");
    }
    for (curve, _) in &curves {
        let _ = writeln!(s, "\nSelection ({} phase), chosen K = {}:\n", curve.phase, curve.chosen);
        let _ = writeln!(s, "| K | chi2/dof | degenerate |");
        let _ = writeln!(s, "|---:|---:|---|");
        for p in &curve.points {
            let _ = writeln!(s, "| {} | {:.3} | {} |", p.n_components, p.chi2_per_dof, p.flagged_degenerate);
        }
    }

    if let Some(t) = &fit.treated {
        let _ = writeln!(s, "\n## Treated cohort\n");
        response_table(&mut s, &t.per_tumor);
        let _ = writeln!(s, "\nCombined Z {:.2} (Stouffer), P {:.3e}.", t.combined_z, t.combined_p);
    }
    if !fit.control.is_empty() {
        let _ = writeln!(s, "\n## Control cohort (full model)\n");
        response_table(&mut s, &fit.control);
        let high = fit.control.iter().filter(|r| r.z.abs() >= 2.0).count();
        let _ = writeln!(s, "\n{high} of {} controls have |Z| >= 2.", fit.control.len());
    }
    if let Some((b, _)) = &baseline {
        let _ = writeln!(s, "\n## Conventional summaries\n");
        let _ = writeln!(s, "| measure | t | dof | P | Z |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for (m, t) in &b.tests {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.1} | {:.3e} | {:.2} |",
                m.name(),
                t.statistic,
                t.dof,
                t.p_two_tailed,
                t.z_equivalent
            );
        }
        let _ = writeln!(s, "\nCombined Z {:.2} (root sum of squares).", b.combined_z);
        if let Some(t) = &fit.treated {
            if b.combined_z > 0.0 {
                let _ = writeln!(s, "Model-based to conventional Z ratio {:.2}.", t.combined_z / b.combined_z);
            }
        }
        let _ = writeln!(s, "Summaries use bin centers, so ADC values carry up to half a bin width of error.");
    }
    if let Some((l, _)) = &loo {
        let _ = writeln!(s, "\n## Leave-one-out\n");
        let _ = writeln!(s, "| tumor | Z all-in | Z held-out | flagged |");
        let _ = writeln!(s, "|---|---:|---:|---|");
        for r in &l.rows {
            let held = r
                .leave_one_out
                .as_ref()
                .map(|x| format!("{:.2}", x.z))
                .unwrap_or_else(|| "failed".into());
            let _ = writeln!(s, "| {} | {:.2} | {} | {} |", r.tumor_id, r.leave_all_in.z, held, r.outlier);
        }
        let _ = writeln!(s, "\n{} models built.", l.models_built);
    }

    out.ensure_dir(None)?;
    out.text("report.md", &s)?;
    if let Some(t) = &fit.treated {
        out.svg(
            "effect_treated.svg",
            &svg::bar_chart("Treated tumors: responding volume", "effect (%)", &bars(&t.per_tumor)),
        )?;
    }
    if !fit.control.is_empty() {
        out.svg(
            "effect_control.svg",
            &svg::bar_chart("Control tumors: apparent response", "effect (%)", &bars(&fit.control)),
        )?;
    }
    out.svg("components.svg", &svg::pmf_heat_strips(&model))
}
