use proptest::prelude::*;

use chase_core::ada::{init_discriminator, liver_region_map, DiscConfig, ForwardCounter, Side};
use chase_core::augment::{augment, AugmentParams, Slice2d};
use chase_core::backbone::{probs_from_logits, Binder};
use chase_core::consistency::{consensus, jsd_loss};
use chase_core::evaluation::{assd, dsc, majority_vote, MetricReport, MetricRow, SkippedRow};
use chase_core::heterofusion::{enumerate_views, ViewCombo};
use chase_core::nn::{poly_decay, Graph, Tensor};
use chase_core::pseudolabel::extract_holes;
use chase_core::synthdata::PhaseId;

fn probs(h: usize, w: usize, logits: &[f64]) -> Tensor {
    probs_from_logits(&Tensor::from_vec([1, 3, h, w], logits.to_vec()))
}

fn pred_set() -> impl Strategy<Value = Vec<Tensor>> {
    (1usize..5, 1usize..5, 1usize..8).prop_flat_map(|(h, w, k)| {
        prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 3 * h * w), k)
            .prop_map(move |ls| ls.iter().map(|l| probs(h, w, l)).collect())
    })
}

fn mask(len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), len)
}

fn phases() -> impl Strategy<Value = Vec<PhaseId>> {
    prop::sample::subsequence(PhaseId::ALL.to_vec(), 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn jsd_is_non_negative(set in pred_set()) {
        let refs: Vec<&Tensor> = set.iter().collect();
        prop_assert!(jsd_loss(&refs).unwrap() >= 0.0);
    }

    #[test]
    fn jsd_vanishes_on_copies(set in pred_set(), k in 1usize..6) {
        let copies = vec![&set[0]; k];
        prop_assert!(jsd_loss(&copies).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn jsd_ignores_set_order(set in pred_set()) {
        let fwd: Vec<&Tensor> = set.iter().collect();
        let rev: Vec<&Tensor> = set.iter().rev().collect();
        prop_assert!((jsd_loss(&fwd).unwrap() - jsd_loss(&rev).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn consensus_rows_stay_on_the_simplex(set in pred_set()) {
        let refs: Vec<&Tensor> = set.iter().collect();
        let m = consensus(&refs).unwrap();
        let hw = m.plane_len();
        for k in 0..hw {
            let s: f64 = (0..3).map(|c| m.data()[c * hw + k]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn view_count_is_two_to_the_n_minus_one(ps in phases()) {
        let views = enumerate_views(&ps).unwrap();
        prop_assert_eq!(views.len(), (1 << ps.len()) - 1);
        let mut sorted = views.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), views.len());
    }

    #[test]
    fn combos_are_canonical(ps in phases()) {
        let fwd = ViewCombo::new(ps.iter().copied()).unwrap();
        let rev = ViewCombo::new(ps.iter().rev().copied()).unwrap();
        prop_assert_eq!(&fwd, &rev);
        prop_assert!(fwd.phases().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dsc_is_bounded_and_symmetric((a, b) in (1usize..200).prop_flat_map(|n| (mask(n), mask(n)))) {
        let x = dsc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, dsc(&b, &a).unwrap());
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn assd_is_non_negative_and_symmetric(
        (s, a, b) in (1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(d, h, w)| (Just([d, h, w]), mask(d * h * w), mask(d * h * w)))
    ) {
        match (assd(&a, &b, s, [1.0, 0.5, 2.0]).unwrap(), assd(&b, &a, s, [1.0, 0.5, 2.0]).unwrap()) {
            (Some(x), Some(y)) => {
                prop_assert!(x >= 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
            (None, None) => {}
            other => prop_assert!(false, "asymmetric definedness {:?}", other),
        }
    }

    #[test]
    fn voting_is_idempotent(m in mask(64), k in 1usize..6) {
        let masks = vec![m.as_slice(); k];
        prop_assert_eq!(majority_vote(&masks).unwrap(), m);
    }

    #[test]
    fn holes_lie_in_the_enclosed_complement(region in mask(6 * 6 * 6), min in 0usize..5) {
        let holes = extract_holes(&region, [6, 6, 6], min);
        prop_assert_eq!(holes.len(), region.len());
        prop_assert!(holes.iter().zip(&region).all(|(&h, &r)| !(h && r)));
        // holes never reach the border
        for (i, &h) in holes.iter().enumerate() {
            let (z, y, x) = (i / 36, (i / 6) % 6, i % 6);
            if [z, y, x].iter().any(|&c| c == 0 || c == 5) {
                prop_assert!(!h);
            }
        }
        // filling the holes removes them
        let filled: Vec<bool> = region.iter().zip(&holes).map(|(&r, &h)| r || h).collect();
        prop_assert!(!extract_holes(&filled, [6, 6, 6], min).iter().any(|&h| h));
    }

    #[test]
    fn liver_region_is_a_probability(logits in prop::collection::vec(-20.0f64..20.0, 3 * 9)) {
        let r = liver_region_map(&probs(3, 3, &logits));
        prop_assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_output_is_in_the_open_interval(region in prop::collection::vec(0.0f64..1.0, 64), seed in 0u64..50) {
        let disc = init_discriminator(&DiscConfig { features: 3 }, seed).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::image(8, 8, region));
        let d = chase_core::ada::discriminate(&mut g, &Binder::frozen(&disc), x, Side::Target, &ForwardCounter::new());
        prop_assert!(g.value(d).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn poly_decay_matches_closed_form(base in 1e-6f64..1.0, total in 1usize..5000, frac in 0.0f64..1.0) {
        let t = ((total as f64) * frac) as usize;
        let want = base * (1.0 - t as f64 / total as f64).powf(0.9);
        prop_assert!((poly_decay(base, t, total, 0.9) - want).abs() <= 1e-9);
    }

    #[test]
    fn augmentation_keeps_the_label_alphabet(
        labels in prop::collection::vec(0u8..3, 100),
        seed in any::<u64>(),
    ) {
        let img = Slice2d::new(10, 10, (0..100).map(|i| i as f64 / 100.0).collect());
        let (im, out) = augment(&img, Some(&labels), &AugmentParams::default(), seed);
        prop_assert!(im.data.iter().all(|v| v.is_finite()));
        prop_assert!(out.unwrap().iter().all(|&l| l <= 2));
    }

    #[test]
    fn metric_tables_round_trip(
        rows in prop::collection::vec((0usize..3, 0usize..4, 0.0f64..1.0, prop::option::of(0.0f64..50.0)), 0..20),
        skipped in prop::collection::vec((0usize..3, 0usize..4), 0..5),
    ) {
        let models = ["baseline", "chase", "chase+holes"];
        let combos = ["NC", "V", "all", "A+V"];
        let round = |v: f64| (v * 1e6).round() / 1e6;
        let report = MetricReport {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(m, c, d, a))| MetricRow {
                    model: models[m].into(),
                    combo: combos[c].into(),
                    study: format!("t{i:03}"),
                    dsc: round(d),
                    assd: a.map(round),
                })
                .collect(),
            skipped: skipped
                .iter()
                .enumerate()
                .map(|(i, &(m, c))| SkippedRow {
                    model: models[m].into(),
                    combo: combos[c].into(),
                    study: format!("s{i:03}"),
                    reason: "phase missing".into(),
                })
                .collect(),
        };
        let back = MetricReport::from_csv(&report.rows_csv(), Some(&report.skipped_csv())).unwrap();
        prop_assert_eq!(back.rows_csv(), report.rows_csv());
        prop_assert_eq!(&back, &report);
    }
}
