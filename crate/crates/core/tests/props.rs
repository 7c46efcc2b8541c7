use chainuq::chain::extract_label;
use chainuq::chain::DEFAULT_EXTRACTION;
use chainuq::eval::{generate_synthetic, SyntheticConfig};
use chainuq::model::validate_dataset;
use chainuq::pmf::{fit_pmf, PmfOptions};
use chainuq::scores::{combine, NormStats, RawScores};
use chainuq::selective::{majority_vote, threshold_from_quantile};
use chainuq::similarity::MaskedMatrix;
use chainuq::store::{read_traces, write_traces, LoadOptions};
use chainuq::weights::{rejection_count, simplex_grid, smooth_trajectory, WeightTrajectory};
use chainuq::{Label, LabelSet};
use proptest::prelude::*;

fn simplex_point() -> impl Strategy<Value = [f64; 3]> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
        .prop_filter("not all zero", |(a, b, c)| a + b + c > 1e-6)
        .prop_map(|(a, b, c)| {
            let s = a + b + c;
            [a / s, b / s, c / s]
        })
}

fn labels() -> LabelSet {
    LabelSet::new(["normal", "abnormal"], Some(Label::new("abnormal")))
}

proptest! {
    #[test]
    fn grid_points_lie_on_the_simplex(n in 1usize..=20) {
        let grid = simplex_grid(1.0 / n as f64).unwrap();
        prop_assert_eq!(grid.len(), (n + 1) * (n + 2) / 2);
        for p in &grid {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn combined_score_stays_in_unit_interval(
        comp in prop::array::uniform3(0.0..=1.0f64),
        alpha in simplex_point(),
    ) {
        let s = combine(&comp, &alpha).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        let lo = comp.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    #[test]
    fn threshold_defers_at_most_the_requested_share(
        scores in prop::collection::vec(0.0..1.0f64, 1..300),
        p in 0.0..0.95f64,
    ) {
        let tau = threshold_from_quantile(&scores, p).unwrap();
        let n = scores.len();
        let kept = scores.iter().filter(|&&s| s <= tau).count();
        prop_assert!(kept as f64 >= (1.0 - p) * n as f64 - 1e-9);
        prop_assert!(scores.contains(&tau));
        // The next lower observed score would keep too few.
        if let Some(lower) = scores.iter().cloned().filter(|&s| s < tau).reduce(f64::max) {
            let kept_lower = scores.iter().filter(|&&s| s <= lower).count();
            prop_assert!((kept_lower as f64) < (1.0 - p) * n as f64 - 1e-9);
        }
    }

    #[test]
    fn rejection_count_is_a_ceiling(p in 0.0..=1.0f64, n in 0usize..5000) {
        let k = rejection_count(p, n);
        prop_assert!(k <= n);
        prop_assert!(k as f64 >= p * n as f64 - 1e-6);
        prop_assert!((k as f64) < p * n as f64 + 1.0);
    }

    #[test]
    fn normalized_scores_stay_in_unit_interval(
        train in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..1.0f64), 1..40),
        probe in (-20.0..20.0f64, -20.0..20.0f64, -1.0..2.0f64),
    ) {
        let raw: Vec<RawScores> = train
            .iter()
            .map(|&(d, t, r)| RawScores { data: Some(d), task: Some(t), refl: Some(r), task_degenerate: false })
            .collect();
        let stats = NormStats::fit(&raw);
        let p = RawScores { data: Some(probe.0), task: Some(probe.1), refl: Some(probe.2), task_degenerate: false };
        for c in stats.normalize(&p) {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn smoothing_stays_on_the_simplex(
        raw in prop::collection::vec(simplex_point(), 2..10),
        h in 0.01..0.5f64,
    ) {
        let levels: Vec<f64> = (1..=raw.len()).map(|i| i as f64 * 0.05).collect();
        let traj = WeightTrajectory::from_raw(levels, raw).unwrap();
        let s = smooth_trajectory(&traj, Some(h)).unwrap();
        for a in &s.alpha_smooth {
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn majority_vote_returns_a_most_common_vote(votes in prop::collection::vec(0usize..3, 0..9)) {
        let names = ["normal", "abnormal", "unclear"];
        let votes: Vec<Label> = votes.iter().map(|&i| Label::new(names[i])).collect();
        let set = LabelSet::new(names, Some(Label::new("abnormal")));
        match majority_vote(&votes, &set) {
            None => prop_assert!(votes.is_empty()),
            Some(w) => {
                let count = |l: &Label| votes.iter().filter(|v| *v == l).count();
                prop_assert!(votes.contains(&w));
                prop_assert!(votes.iter().all(|v| count(v) <= count(&w)));
            }
        }
    }

    #[test]
    fn extraction_is_pure_and_takes_the_last_answer(
        prefix in "[a-z ]{0,40}",
        first in prop::bool::ANY,
        second in prop::bool::ANY,
    ) {
        let name = |b: bool| if b { "Abnormal" } else { "normal" };
        let text = format!("{prefix}\nFinal answer: {}\nmore thought\nfinal ANSWER : {}\n", name(first), name(second));
        let rule = regex::Regex::new(DEFAULT_EXTRACTION).unwrap();
        let a = extract_label(&rule, &text, &labels()).unwrap();
        let b = extract_label(&rule, &text, &labels()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.as_str(), name(second).to_lowercase());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn als_loss_never_rises(
        seed in 0u64..1000,
        n in 3usize..12,
        l in 3usize..10,
        k in 1usize..4,
        lambda in 0.0..0.5f64,
    ) {
        let k = k.min(n).min(l);
        let values: Vec<f64> = (0..n * l).map(|e| (e as f64 * 0.37 + seed as f64).sin()).collect();
        let observed: Vec<bool> = (0..n * l).map(|e| (e as u64 * 7 + seed) % 5 != 0).collect();
        let m = MaskedMatrix::new(n, l, values, observed).unwrap();
        let fit = fit_pmf(&m, k, lambda, lambda, &PmfOptions { seed, ..Default::default() }).unwrap();
        for w in fit.loss_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn traces_round_trip_and_validation_is_stable(seed in 0u64..500, n in 1usize..15) {
        let data = generate_synthetic(&SyntheticConfig { n, m: 3, seed, failure_rate: 0.1, ..Default::default() })
            .unwrap()
            .dataset;
        let mut buf = Vec::new();
        write_traces(&mut buf, &data.traces).unwrap();
        let back = read_traces(buf.as_slice(), &LoadOptions { strict: true, ..Default::default() }).unwrap();
        prop_assert!(back.skipped.is_empty());
        prop_assert_eq!(&back.dataset.traces, &data.traces);
        prop_assert_eq!(validate_dataset(&back.dataset), validate_dataset(&data));
        prop_assert_eq!(validate_dataset(&data), validate_dataset(&data));
    }
}
