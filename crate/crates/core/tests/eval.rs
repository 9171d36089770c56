use proptest::prelude::*;
use semidense::coarse::MatchMode;
use semidense::config::ModelConfig;
use semidense::eval::{bench_pipeline, corner_auc, evaluate, median, AUC_THRESHOLDS};
use semidense::geometry::RansacParams;
use semidense::model::{init_params, Matcher, StageTimings};
use semidense::synth::generate_set;

fn toy_matcher() -> Matcher {
    let cfg = ModelConfig::toy();
    let p = init_params(&cfg, 0);
    Matcher::new(cfg, &p).unwrap()
}

proptest! {
    #[test]
    fn auc_is_monotone_in_threshold_and_error(errs in prop::collection::vec(0.0f64..30.0, 1..20), bump in 0.0f64..5.0, k in 0usize..20) {
        let auc = corner_auc(&errs, &AUC_THRESHOLDS).unwrap();
        prop_assert!(auc[0] <= auc[1] && auc[1] <= auc[2]);
        prop_assert!(auc.iter().all(|a| (0.0..=1.0).contains(a)));
        let mut worse = errs.clone();
        let i = k % worse.len();
        worse[i] += bump;
        let auc2 = corner_auc(&worse, &AUC_THRESHOLDS).unwrap();
        prop_assert!(auc2.iter().zip(&auc).all(|(b, a)| b <= a));
    }
}

#[test]
fn auc_closed_forms() {
    // One error at each of 0, 1.5 and 20 px: (1 + (1 - 1.5 / t) + 0) / 3.
    let auc = corner_auc(&[0.0, 1.5, 20.0], &AUC_THRESHOLDS).unwrap();
    for (a, t) in auc.iter().zip(AUC_THRESHOLDS) {
        assert!((a - (2.0 - 1.5 / t) / 3.0).abs() < 1e-15);
    }
    assert!(corner_auc(&[-1.0], &[3.0]).is_err());
    assert!(corner_auc(&[f64::NAN], &[3.0]).is_err());
    assert_eq!(median(&[5.0]), Some(5.0));
}

#[test]
fn evaluate_reports_one_error_per_pair() {
    let m = toy_matcher();
    let pairs = generate_set(64, 3, 4);
    let rep = evaluate(&m, &pairs, MatchMode::Optimized, &RansacParams::default()).unwrap();
    assert_eq!(rep.corner_errors.len(), 3);
    assert_eq!(rep.n_matches.len(), 3);
    assert!(rep.auc[0] <= rep.auc[1] && rep.auc[1] <= rep.auc[2]);
    assert!(rep.to_csv().lines().count() == 6);
}

#[test]
fn bench_stage_sum_tracks_end_to_end() {
    let m = toy_matcher();
    let p = &generate_set(128, 1, 5)[0];
    let rep = bench_pipeline(&m, &p.a, &p.b, MatchMode::Full, 5, 1).unwrap();
    assert_eq!(rep.samples.len(), 5);
    for (s, e) in rep.samples.iter().zip(&rep.end_to_end) {
        let ratio = s.total().as_secs_f64() / e.as_secs_f64();
        assert!((0.9..=1.0).contains(&ratio), "stage sum / end to end = {ratio}");
    }
    let text = rep.to_string();
    for name in StageTimings::NAMES {
        assert!(text.contains(name));
    }
    let one = bench_pipeline(&m, &p.a, &p.b, MatchMode::Full, 1, 0).unwrap();
    assert_eq!(one.samples.len(), 1);
    assert!(bench_pipeline(&m, &p.a, &p.b, MatchMode::Full, 0, 0).is_err());
}

#[test]
fn optimized_coarse_stage_is_faster() {
    let m = toy_matcher();
    let p = &generate_set(256, 1, 6)[0];
    let full = bench_pipeline(&m, &p.a, &p.b, MatchMode::Full, 5, 1).unwrap();
    let opt = bench_pipeline(&m, &p.a, &p.b, MatchMode::Optimized, 5, 1).unwrap();
    let (f, o) = (full.stage(2).0, opt.stage(2).0);
    assert!(o < f, "optimized {o:?} vs full {f:?}");
}

