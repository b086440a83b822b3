#[path = "common/oracles.rs"]
mod oracles;

use fgcm::metrics::{
    compute_eer, det_curve, min_tdcf, parse_scores, read_scores, write_scores, Key, TdcfParams, Trial,
};
use proptest::prelude::*;
use std::path::Path;

fn trials(bona: &[f64], spoof: &[f64]) -> Vec<Trial> {
    let b = bona.iter().enumerate().map(|(i, &s)| Trial::new(format!("b{i}"), Key::Bonafide, s));
    let s = spoof.iter().enumerate().map(|(i, &s)| Trial::new(format!("s{i}"), Key::Spoof, s));
    b.chain(s).collect()
}

fn default_coefficients() -> (f64, f64) {
    oracles::tdcf_coefficients(0.9405, 0.0095, 0.05, [1.0, 10.0, 1.0, 10.0], (0.0, 0.0, 0.0))
}

// small integer grids force plenty of ties
fn scores(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((0i32..12).prop_map(|v| v as f64 * 0.25), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn det_curve_matches_counting(bona in scores(1..30), spoof in scores(1..30)) {
        let det = det_curve(&trials(&bona, &spoof)).unwrap();
        let thr = oracles::candidate_thresholds(&bona, &spoof);
        prop_assert_eq!(&det.thresholds, &thr);
        for (j, &t) in thr.iter().enumerate() {
            let (m, f) = oracles::rates_at(&bona, &spoof, t);
            prop_assert_eq!((det.p_miss[j], det.p_fa[j]), (m, f));
        }
    }

    #[test]
    fn eer_and_tdcf_match_brute_force(bona in scores(1..40), spoof in scores(1..40)) {
        let t = trials(&bona, &spoof);
        let (eer, _) = compute_eer(&t).unwrap();
        prop_assert!((eer - oracles::brute_eer(&bona, &spoof)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&eer));
        let (c1, c2) = default_coefficients();
        let (dcf, _) = min_tdcf(&t, &TdcfParams::default()).unwrap();
        prop_assert!((dcf - oracles::brute_min_tdcf(&bona, &spoof, c1, c2)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&dcf));
    }

    #[test]
    fn rank_order_transforms_change_nothing(bona in scores(1..25), spoof in scores(1..25)) {
        let warp = |v: &[f64]| v.iter().map(|s| (s * 0.7).exp() - 4.0).collect::<Vec<_>>();
        let (a, b) = (trials(&bona, &spoof), trials(&warp(&bona), &warp(&spoof)));
        prop_assert_eq!(compute_eer(&a).unwrap().0, compute_eer(&b).unwrap().0);
        let p = TdcfParams::default();
        prop_assert_eq!(min_tdcf(&a, &p).unwrap().0, min_tdcf(&b, &p).unwrap().0);
    }

    #[test]
    fn label_swap_keeps_eer(bona in scores(1..25), spoof in scores(1..25)) {
        let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
        let a = compute_eer(&trials(&bona, &spoof)).unwrap().0;
        let b = compute_eer(&trials(&neg(&spoof), &neg(&bona))).unwrap().0;
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn worked_eer_example() {
    let (bona, spoof) = ([0.6, 0.4, 0.8], [0.5, 0.3, 0.7]);
    let (eer, _) = compute_eer(&trials(&bona, &spoof)).unwrap();
    assert!((eer - oracles::brute_eer(&bona, &spoof)).abs() <= 1e-12);
    assert_eq!(compute_eer(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap().0, 0.0);
    assert_eq!(compute_eer(&trials(&[0.1, 0.2], &[0.8, 0.9])).unwrap().0, 1.0);
}

#[test]
fn twenty_trial_tdcf() {
    let bona: Vec<f64> = (0..10).map(|i| ((i * 7919) % 23) as f64 / 7.0).collect();
    let spoof: Vec<f64> = (0..10).map(|i| ((i * 104729) % 19) as f64 / 9.0 - 0.5).collect();
    let (c1, c2) = default_coefficients();
    let (dcf, _) = min_tdcf(&trials(&bona, &spoof), &TdcfParams::default()).unwrap();
    assert!((dcf - oracles::brute_min_tdcf(&bona, &spoof, c1, c2)).abs() <= 1e-12);
}

#[test]
fn single_class_is_rejected() {
    assert!(det_curve(&trials(&[1.0], &[])).is_err());
    assert!(compute_eer(&trials(&[], &[1.0])).is_err());
}

#[test]
fn score_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    let t: Vec<Trial> = (0..100)
        .map(|i| {
            let key = if i % 3 == 0 { Key::Spoof } else { Key::Bonafide };
            Trial::new(format!("utt{i:03}"), key, (i as f64 * 0.37).sin() * 1e3 / 7.0)
        })
        .collect();
    write_scores(&t, &path).unwrap();
    let back = read_scores(&path).unwrap();
    assert_eq!(back.len(), 100);
    for (a, b) in t.iter().zip(&back) {
        assert_eq!((&a.id, a.key), (&b.id, b.key));
        assert!((a.score - b.score).abs() <= 1e-9);
    }
}

#[test]
fn malformed_and_empty_files() {
    let err = parse_scores(Path::new("x"), "a bonafide 1.0\nb spoof\n").unwrap_err();
    assert!(err.to_string().contains(":2:"), "{err}");
    assert!(parse_scores(Path::new("x"), "").unwrap().is_empty());
}
