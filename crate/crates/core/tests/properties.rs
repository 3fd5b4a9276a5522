use lpm_core::baseline::{combine_z, welch_t_test};
use lpm_core::histograms::{BinningConfig, Cohort, Histogram2D};
use lpm_core::inference::stouffer;
use lpm_core::lpm::{self, TrainingMeta};
use lpm_core::selection::cell_chi2;
use lpm_core::synth::{bump, with_uniform_floor};
use lpm_core::{stats, ComponentPmf, LpmModel, Phase};
use proptest::prelude::*;

fn small_model() -> LpmModel {
    let b = BinningConfig::new(0.0, 3.0e-3, 6).unwrap();
    let probs = [
        with_uniform_floor(&bump(&b, [0.8e-3, 0.9e-3], [0.4e-3, 0.4e-3], 0.5), 0.05),
        with_uniform_floor(&bump(&b, [1.8e-3, 2.2e-3], [0.4e-3, 0.5e-3], 0.5), 0.05),
    ];
    LpmModel {
        binning: b,
        n_control: 1,
        n_treatment: 1,
        components: vec![
            ComponentPmf {
                phase: Phase::Control,
                index: 0,
                probs: probs[0].clone(),
            },
            ComponentPmf {
                phase: Phase::Treatment,
                index: 1,
                probs: probs[1].clone(),
            },
        ],
        training_meta: TrainingMeta {
            seed: 0,
            restarts: 1,
            iterations: 0,
            final_loglik: 0.0,
            chi2_per_dof: None,
            phases: Vec::new(),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantity_fit_is_feasible_and_optimal(cells in prop::collection::vec(0u64..400, 12), seed in 0u64..1000) {
        prop_assume!(cells.iter().sum::<u64>() > 0);
        let model = small_model();
        let h = Histogram2D::from_cells("p", Cohort::Treated, model.binning, &cells).unwrap();
        let (q, _) = lpm::fit_quantities(&model, &h, seed).unwrap();
        prop_assert!(q.0.iter().all(|&v| v >= 0.0));
        let total = h.total() as f64;
        prop_assert!((q.total() - total).abs() <= 1e-6 * total);
        let best = lpm::log_likelihood(&model, &h, &q).unwrap();
        for alt in [[total, 0.0], [0.0, total], [total / 2.0, total / 2.0]] {
            let other = lpm::log_likelihood(&model, &h, &lpm_core::QuantityVector(alt.to_vec())).unwrap();
            prop_assert!(best >= other - 1e-9 * best.abs());
        }
    }

    #[test]
    fn cell_chi2_is_a_symmetric_distance(h in 0.0f64..1e4, m in 0.0f64..1e4) {
        let d = cell_chi2(h, m);
        prop_assert!(d >= 0.0);
        prop_assert!((d - cell_chi2(m, h)).abs() <= 1e-9 * (1.0 + d));
        prop_assert_eq!(cell_chi2(h, h), 0.0);
    }

    #[test]
    fn stouffer_of_repeated_z(z in -20.0f64..20.0, n in 1usize..50) {
        let combined = stouffer(&vec![z; n]).unwrap();
        prop_assert!((combined - z * (n as f64).sqrt()).abs() < 1e-9 * (1.0 + combined.abs()));
    }

    #[test]
    fn rss_dominates_each_input(z in prop::collection::vec(-10.0f64..10.0, 1..6)) {
        let c = combine_z(&z).unwrap();
        prop_assert!(z.iter().all(|v| c >= v.abs() - 1e-12));
    }

    #[test]
    fn welch_is_antisymmetric(a in prop::collection::vec(-5.0f64..5.0, 2..8), b in prop::collection::vec(-5.0f64..5.0, 2..8)) {
        let (Ok(x), Ok(y)) = (welch_t_test(&a, &b), welch_t_test(&b, &a)) else { return Ok(()); };
        prop_assert!((x.statistic + y.statistic).abs() < 1e-12 * (1.0 + x.statistic.abs()));
        prop_assert!((x.p_two_tailed - y.p_two_tailed).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&x.p_two_tailed));
    }

    #[test]
    fn p_and_z_invert(z in 0.0f64..8.0) {
        let back = stats::z_from_p_two_tailed(stats::p_two_tailed(z));
        prop_assert!((back - z).abs() < 1e-6);
    }

    #[test]
    fn histogram_json_round_trips(cells in prop::collection::vec(0u64..1_000_000, 64), overflow in 0u64..10) {
        let mut h = Histogram2D::from_cells("rt", Cohort::Control, BinningConfig::default(), &cells).unwrap();
        h.overflow = overflow;
        let back: Histogram2D = serde_json::from_str(&h.to_json_string().unwrap()).unwrap();
        prop_assert_eq!(back, h);
    }

    #[test]
    fn bin_centers_land_in_their_bin(n in 1usize..200, lo in 0.0f64..1e-3, span in 1e-4f64..5e-3) {
        let b = BinningConfig::new(lo, lo + span, n).unwrap();
        for bin in 0..n {
            prop_assert_eq!(b.bin_index(b.center(bin)), Some(bin));
        }
    }
}
