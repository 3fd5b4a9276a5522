use lpm_core::baseline::{self, welch_t_test};
use lpm_core::histograms::{self, BinningConfig, Cohort, Histogram2D, Timepoint, VoxelRecord};
use lpm_core::inference::{self, quantity_covariance, CovarianceScaling, InferenceOptions};
use lpm_core::lpm::{self, TrainOptions, TrainingMeta};
use lpm_core::selection::{self, ParameterCount, SelectionOptions};
use lpm_core::synth::{self, bump, total_variation, with_uniform_floor, SynthSpec};
use lpm_core::{stats, ComponentPmf, Error, LpmModel, Phase, QuantityVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn pmfs(phase: Phase, offset: usize, probs: Vec<Vec<f64>>) -> Vec<ComponentPmf> {
    probs
        .into_iter()
        .enumerate()
        .map(|(i, probs)| ComponentPmf {
            phase,
            index: offset + i,
            probs,
        })
        .collect()
}

fn meta() -> TrainingMeta {
    TrainingMeta {
        seed: 0,
        restarts: 1,
        iterations: 0,
        final_loglik: 0.0,
        chi2_per_dof: None,
        phases: Vec::new(),
    }
}

fn model(binning: BinningConfig, control: Vec<Vec<f64>>, treatment: Vec<Vec<f64>>) -> LpmModel {
    let (nc, nt) = (control.len(), treatment.len());
    let mut components = pmfs(Phase::Control, 0, control);
    components.extend(pmfs(Phase::Treatment, nc, treatment));
    LpmModel {
        binning,
        n_control: nc,
        n_treatment: nt,
        components,
        training_meta: meta(),
    }
}

fn expectation(probs: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    (0..probs[0].len()).map(|c| probs.iter().zip(q).map(|(p, q)| p[c] * q).sum()).collect()
}

fn sample(id: &str, cohort: Cohort, b: BinningConfig, m: &[f64], rng: &mut ChaCha8Rng) -> Histogram2D {
    let cells: Vec<u64> = m
        .iter()
        .map(|&mu| if mu > 0.0 { Poisson::new(mu).unwrap().sample(rng) as u64 } else { 0 })
        .collect();
    Histogram2D::from_cells(id, cohort, b, &cells).unwrap()
}

fn separated_pair(b: &BinningConfig) -> Vec<Vec<f64>> {
    vec![
        bump(b, [0.6e-3, 0.65e-3], [0.12e-3, 0.12e-3], 0.5),
        bump(b, [1.5e-3, 1.55e-3], [0.15e-3, 0.15e-3], 0.5),
    ]
}

fn floored(b: &BinningConfig) -> Vec<Vec<f64>> {
    vec![
        with_uniform_floor(&bump(b, [0.6e-3, 0.7e-3], [0.15e-3, 0.15e-3], 0.5), 0.15),
        with_uniform_floor(&bump(b, [1.2e-3, 1.3e-3], [0.2e-3, 0.2e-3], 0.45), 0.15),
        with_uniform_floor(&bump(b, [1.0e-3, 2.2e-3], [0.2e-3, 0.25e-3], 0.55), 0.15),
    ]
}

#[test]
fn binning_matches_an_independent_tally() {
    let b = BinningConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut records = Vec::new();
    let mut tally = vec![[0u64; 2]; b.n_adc_bins];
    let mut outside = 0;
    for i in 0..10_000 {
        let adc: f64 = rng.random_range(1e-6..3.3e-3);
        let tp = if i % 2 == 0 { Timepoint::Baseline } else { Timepoint::Followup };
        let k = (adc - b.adc_min) / b.width();
        if adc < b.adc_max {
            tally[k.floor() as usize][tp.index()] += 1;
        } else {
            outside += 1;
        }
        records.push(VoxelRecord::new("u", Cohort::Control, tp, adc).unwrap());
    }
    let binned = histograms::bin_voxels(&records, &b).unwrap();
    let h = &binned.histograms["u"];
    assert_eq!(h.counts, tally);
    assert_eq!(h.overflow, outside);
    assert_eq!(h.total() + h.overflow, 10_000);
}

#[test]
fn voxel_csv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    std::fs::write(&path, "tumor_id,cohort,timepoint,adc\nT1,treated,0,1.1e-3\nT1,treated,72,1.4e-3\n").unwrap();
    let load = histograms::load_voxel_csv(&path).unwrap();
    assert_eq!(load.records.len(), 2);
    assert!(load.rejected.is_empty());
    assert_eq!(load.records[1].timepoint, Timepoint::Followup);

    std::fs::write(&path, "tumor_id,cohort,timepoint,adc\nT1,treated,0,NaN\nT1,treated,0,1e-3\n").unwrap();
    let load = histograms::load_voxel_csv(&path).unwrap();
    assert_eq!(load.records.len(), 1);
    assert_eq!(load.rejected.len(), 1);
    assert_eq!(load.rejected[0].line, 2);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<VoxelRecord> = (0..1000)
        .map(|i| {
            let cohort = if i % 7 < 3 { Cohort::Treated } else { Cohort::Control };
            let tp = if i % 2 == 0 { Timepoint::Baseline } else { Timepoint::Followup };
            VoxelRecord::new(format!("t{}", i % 7), cohort, tp, rng.random_range(1e-5..3e-3)).unwrap()
        })
        .collect();
    histograms::write_voxel_csv(&path, &records).unwrap();
    let back = histograms::load_voxel_csv(&path).unwrap();
    assert!(back.rejected.is_empty());
    assert_eq!(back.records, records);
}

#[test]
fn control_training_recovers_generating_quantities() {
    let b = BinningConfig::default();
    let truth = separated_pair(&b);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fractions = [0.2, 0.3, 0.4, 0.5, 0.6, 0.6, 0.7, 0.85];
    let total = 10_000.0;
    let cohort: Vec<Histogram2D> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| sample(&format!("c{i}"), Cohort::Control, b, &expectation(&truth, &[f * total, (1.0 - f) * total]), &mut rng))
        .collect();
    let out = lpm::train_control(&cohort, 2, &TrainOptions::default()).unwrap();
    let learned = out.model.probs();
    let order = if total_variation(&learned[0], &truth[0]) < total_variation(&learned[0], &truth[1]) {
        [0, 1]
    } else {
        [1, 0]
    };
    for (k, &j) in order.iter().enumerate() {
        let tv = total_variation(&learned[k], &truth[j]);
        assert!(tv < 0.05, "component {k}: total variation {tv}");
    }
    for ((h, q), f) in cohort.iter().zip(&out.quantities).zip(fractions) {
        let cov = quantity_covariance(&out.model, h, q, None).unwrap();
        let generating = [f * total, (1.0 - f) * total];
        for (k, &j) in order.iter().enumerate() {
            let dev = (q.0[k] - generating[j]).abs() / cov.variance(k).sqrt();
            assert!(dev < 3.0, "{} component {j}: {} vs {} ({dev:.2} sigma)", h.tumor_id, q.0[k], generating[j]);
        }
    }
}

#[test]
fn zero_treatment_components_refit_the_control_model() {
    let data = synth::generate(&synth::lovo_like(31)).unwrap();
    let opts = TrainOptions::default();
    let control = lpm::train_control(&data.control, 3, &opts).unwrap();
    let out = lpm::train_treatment(&control.model, &data.control, 0, &opts).unwrap();
    assert_eq!(out.model.probs(), control.model.probs());
    for (a, b) in out.quantities.iter().zip(&control.quantities) {
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn novel_component_recovers_its_mass_fraction() {
    let b = BinningConfig::default();
    let control = separated_pair(&b);
    let novel = bump(&b, [0.9e-3, 2.3e-3], [0.12e-3, 0.15e-3], 0.55);
    let all = vec![control[0].clone(), control[1].clone(), novel];
    let base = model(b, control.clone(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = expectation(&all, &[3000.0, 3000.0, 4000.0]);
    let treated: Vec<Histogram2D> = (0..6).map(|i| sample(&format!("t{i}"), Cohort::Treated, b, &m, &mut rng)).collect();
    let out = lpm::train_treatment(&base, &treated, 1, &TrainOptions::default()).unwrap();
    assert_eq!(&out.model.probs()[..2], &control[..]);
    for (h, q) in treated.iter().zip(&out.quantities) {
        let cov = quantity_covariance(&out.model, h, q, None).unwrap();
        let r = inference::response_result(&out.model, h, q, &cov).unwrap();
        let dev = (r.effect_fraction - 0.4).abs() / r.effect_fraction_sigma;
        assert!(dev < 3.0, "{}: fraction {} +- {}", h.tumor_id, r.effect_fraction, r.effect_fraction_sigma);
    }
}

#[test]
fn sampled_mixture_quantities_are_within_three_sigma() {
    let b = BinningConfig::default();
    let probs = floored(&b);
    let m0 = model(b, probs.clone(), Vec::new());
    let q_true = [5000.0, 3000.0, 2000.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = sample("mix", Cohort::Control, b, &expectation(&probs, &q_true), &mut rng);
    let (q, _) = lpm::fit_quantities(&m0, &h, 0).unwrap();
    let cov = quantity_covariance(&m0, &h, &q, None).unwrap();
    for (k, truth) in q_true.iter().enumerate() {
        let dev = (q.0[k] - truth).abs() / cov.variance(k).sqrt();
        assert!(dev < 3.0, "component {k}: {dev:.2} sigma");
    }
}

#[test]
fn expectation_of_zero_and_single_components() {
    let b = BinningConfig::default();
    let probs = floored(&b);
    let m = model(b, probs.clone(), Vec::new());
    let zero = lpm::model_expectation(&m, &QuantityVector(vec![0.0; 3])).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    let single = model(b, vec![probs[1].clone()], Vec::new());
    let e = lpm::model_expectation(&single, &QuantityVector(vec![100.0])).unwrap();
    for (x, p) in e.iter().zip(&probs[1]) {
        assert_eq!(*x, 100.0 * p);
    }
    assert!(lpm::model_expectation(&m, &QuantityVector(vec![1.0])).is_err());
}

#[test]
fn fixed_model_chi2_is_calibrated() {
    let b = BinningConfig::default();
    assert_eq!(b.n_cells(), 64);
    let probs = floored(&b);
    let m = expectation(&probs, &[5000.0, 3000.0, 2000.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let repeats = 200;
    let mut inside = 0;
    let mut worst = (f64::INFINITY, 0.0f64);
    for r in 0..repeats {
        let h = sample(&format!("r{r}"), Cohort::Control, b, &m, &mut rng);
        let gof = selection::chi2_from_expectations(&[h.cells()], std::slice::from_ref(&m), 3, ParameterCount::fixed()).unwrap();
        worst = (worst.0.min(gof.chi2_per_dof), worst.1.max(gof.chi2_per_dof));
        if (0.6..=1.5).contains(&gof.chi2_per_dof) {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.99 * repeats as f64, "{inside}/{repeats} inside, range {worst:?}");
}

#[test]
fn selection_finds_the_generating_count() {
    let data = synth::generate(&synth::selection_scenario(3, 41).unwrap()).unwrap();
    let out = selection::select_components(&data.control, Phase::Control, None, 1, 6, &SelectionOptions::default()).unwrap();
    let chosen = out.best.model.n_control;
    assert_eq!(chosen, 3, "curve {:?}", out.curve);
    let chi2 = out.curve.point(3).unwrap().chi2_per_dof;
    assert!((0.7..=1.4).contains(&chi2), "chi2/dof at 3: {chi2}");

    let mut last: Option<(f64, usize)> = None;
    for k in 1..=5 {
        let fit = lpm::train_control(&data.control, k, &TrainOptions::default()).unwrap();
        let gof = selection::chi2_per_dof(&data.control, &fit.model, &fit.quantities, ParameterCount::training(k)).unwrap();
        if let Some((raw, dof)) = last {
            assert!(gof.raw_chi2 <= 1.05 * raw, "raw chi2 rose from {raw} to {} at K = {k}", gof.raw_chi2);
            assert!(gof.dof < dof);
        }
        last = Some((gof.raw_chi2, gof.dof));
    }
}

#[test]
fn empty_selection_range_is_rejected() {
    let data = synth::generate(&synth::selection_scenario(2, 42).unwrap()).unwrap();
    let r = selection::select_components(&data.control, Phase::Control, None, 3, 3, &SelectionOptions::default());
    assert!(r.unwrap_err().is_input_error());
}

fn no_scaling() -> InferenceOptions {
    InferenceOptions {
        scaling: CovarianceScaling::None,
        seed: 0,
    }
}

#[test]
fn single_component_error_is_poisson() {
    let b = BinningConfig::default();
    let probs = floored(&b);
    let m = model(b, vec![probs[0].clone(), probs[1].clone()], vec![probs[2].clone()]);
    let cells: Vec<u64> = probs[2].iter().map(|p| (p * 1.0e4).round() as u64).collect();
    let h = Histogram2D::from_cells("pure", Cohort::Treated, b, &cells).unwrap();
    let single = model(b, vec![probs[2].clone()], Vec::new());
    let (q, _) = lpm::fit_quantities(&single, &h, 0).unwrap();
    let cov = quantity_covariance(&single, &h, &q, None).unwrap();
    let total = h.total() as f64;
    assert!((cov.variance(0).sqrt() - total.sqrt()).abs() < 1e-6 * total.sqrt());

    let a = inference::assess(&m, &h, &no_scaling()).unwrap();
    assert!(a.response.z > 5.0, "pure treatment histogram z {}", a.response.z);
}

#[test]
fn no_treatment_mass_gives_zero_z() {
    let b = BinningConfig::default();
    let probs = separated_pair(&b);
    let m = model(b, vec![probs[0].clone()], vec![probs[1].clone()]);
    let cells: Vec<u64> = probs[0].iter().map(|p| (p * 1.0e4).round() as u64).collect();
    let h = Histogram2D::from_cells("ctl", Cohort::Control, b, &cells).unwrap();
    let q = QuantityVector(vec![h.total() as f64, 0.0]);
    let cov = quantity_covariance(&m, &h, &q, None).unwrap();
    let r = inference::response_result(&m, &h, &q, &cov).unwrap();
    assert_eq!(r.z, 0.0);
    assert_eq!(r.p_two_tailed, 1.0);
    assert_eq!(r.effect_fraction, 0.0);
}

#[test]
fn z_grows_with_counts() {
    let b = BinningConfig::default();
    let probs = floored(&b);
    let m = model(b, vec![probs[0].clone(), probs[1].clone()], vec![probs[2].clone()]);
    let base = expectation(&probs, &[500.0, 400.0, 100.0]);
    let mut prev = 0.0;
    for k in [1.0, 4.0, 16.0] {
        let cells: Vec<u64> = base.iter().map(|v| (v * k).round() as u64).collect();
        let h = Histogram2D::from_cells("s", Cohort::Treated, b, &cells).unwrap();
        let z = inference::assess(&m, &h, &no_scaling()).unwrap().response.z;
        assert!(z > prev, "z {z} at scale {k} after {prev}");
        prev = z;
    }
}

#[test]
fn summaries_of_flat_and_point_histograms() {
    let b = BinningConfig::default();
    let mut point = Histogram2D::empty("p", Cohort::Control, b);
    point.counts[7] = [40, 25];
    let s = baseline::summarise(&point).unwrap();
    assert_eq!(s.iqr_adc, [0.0, 0.0]);
    assert_eq!(s.mean_adc, [b.center(7), b.center(7)]);

    let mut flat = Histogram2D::empty("f", Cohort::Control, b);
    flat.counts.iter_mut().for_each(|c| *c = [50, 50]);
    let s = baseline::summarise(&flat).unwrap();
    let mid = 0.5 * (b.adc_min + b.adc_max);
    for t in 0..2 {
        assert!((s.mean_adc[t] - mid).abs() < 1e-15);
        assert!((s.iqr_adc[t] - 0.5 * (b.adc_max - b.adc_min)).abs() <= b.width());
    }
}

#[test]
fn sampled_gaussian_summaries() {
    let b = BinningConfig::default();
    let (mu, sd) = (1.3e-3, 0.3e-3);
    let normal = Normal::new(mu, sd).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut records = Vec::new();
    while records.len() < 10_000 {
        let adc = normal.sample(&mut rng);
        if adc > 0.0 {
            records.push(VoxelRecord::new("g", Cohort::Control, Timepoint::Baseline, adc).unwrap());
            records.push(VoxelRecord::new("g", Cohort::Control, Timepoint::Followup, adc).unwrap());
        }
    }
    let h = histograms::bin_voxels(&records, &b).unwrap().histograms.remove("g").unwrap();
    let s = baseline::summarise(&h).unwrap();
    let se = sd / 100.0;
    assert!((s.mean_adc[0] - mu).abs() < 2.0 * se, "mean {}", s.mean_adc[0]);
    assert!((s.iqr_adc[0] - 1.349 * sd).abs() < 2.0 * b.width(), "iqr {}", s.iqr_adc[0]);
}

#[test]
fn welch_near_degenerate_separation() {
    let r = welch_t_test(&[0.0; 4], &[10.0, 10.0, 10.0, 10.0001]).unwrap();
    assert!(r.p_two_tailed < 1e-6);
    // scipy.stats.ttest_ind(equal_var=False): dof 3, p 3.445779752871818e-17
    assert!((r.dof - 3.0).abs() < 1e-9);
    let x = r.statistic / 3f64.sqrt();
    // Two-tailed tail of t with 3 dof: 1 - (2/pi)(atan x + x/(1+x^2)), rewritten to avoid cancellation.
    let series = 2.0 / std::f64::consts::PI * ((1.0 / x).atan() - x / (1.0 + x * x));
    assert!((r.p_two_tailed - series).abs() < 1e-3 * series, "{} vs {series}", r.p_two_tailed);
    assert!((r.p_two_tailed - 3.445779752871818e-17).abs() < 1e-3 * 3.445779752871818e-17);
}

#[test]
fn welch_eight_versus_ten() {
    let control = [1.2, 0.8, 1.5, 0.9, 1.1, 1.3, 0.7, 1.0];
    let treated = [1.9, 2.4, 1.6, 2.2, 2.0, 1.8, 2.6, 2.1, 1.7, 2.3];
    let r = welch_t_test(&control, &treated).unwrap();

    let (mc, mt) = (control.iter().sum::<f64>() / 8.0, treated.iter().sum::<f64>() / 10.0);
    let vc = control.iter().map(|x| (x - mc) * (x - mc)).sum::<f64>() / 7.0;
    let vt = treated.iter().map(|x| (x - mt) * (x - mt)).sum::<f64>() / 9.0;
    let (a, c) = (vc / 8.0, vt / 10.0);
    let t = (mt - mc) / (a + c).sqrt();
    let nu = (a + c).powi(2) / (a * a / 7.0 + c * c / 9.0);
    assert!((r.statistic - t).abs() < 1e-12);
    assert!((r.dof - nu).abs() < 1e-10);

    // scipy.stats.ttest_ind(treated, control, equal_var=False)
    assert!((r.statistic - 7.203918850932635).abs() < 1e-12);
    assert!((r.dof - 15.952665070787708).abs() < 1e-9);
    assert!((r.p_two_tailed - 2.1376876898087526e-06).abs() < 1e-12);
    assert!((r.z_equivalent - stats::z_from_p_two_tailed(r.p_two_tailed)).abs() < 1e-12);
}

#[test]
fn welch_is_shift_invariant() {
    let control = [0.3, -0.1, 0.4, 0.2];
    let treated = [1.1, 0.9, 1.6, 1.2, 0.8];
    let r = welch_t_test(&control, &treated).unwrap();
    let shift = |xs: &[f64]| xs.iter().map(|x| x + 7.5).collect::<Vec<_>>();
    let s = welch_t_test(&shift(&control), &shift(&treated)).unwrap();
    assert!((r.statistic - s.statistic).abs() < 1e-9);
}

#[test]
fn point_mass_totals_are_poisson() {
    let b = BinningConfig::new(0.0, 3.0e-3, 8).unwrap();
    let mut probs = vec![0.0; b.n_cells()];
    probs[5] = 1.0;
    let mut sum = 0.0;
    for seed in 0..1000 {
        let spec = SynthSpec {
            binning: b,
            control_pmfs: pmfs(Phase::Control, 0, vec![probs.clone()]),
            treatment_pmfs: Vec::new(),
            cohort_sizes: (1, 0),
            counts_per_tumor: 100.0,
            quantity_dirichlet_alpha: vec![1.0],
            seed,
            contamination: None,
        };
        let data = synth::generate(&spec).unwrap();
        let h = &data.control[0];
        assert!(h.cells().iter().filter(|&&c| c > 0.0).count() <= 1);
        sum += h.total() as f64;
    }
    let mean = sum / 1000.0;
    assert!((97.0..=103.0).contains(&mean), "mean total {mean}");
}

#[test]
fn empty_cohorts_are_rejected() {
    assert!(matches!(lpm::train_control(&[], 2, &TrainOptions::default()), Err(Error::EmptyInput(_))));
}
