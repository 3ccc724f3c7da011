mod common;

use ouiqa::losses::{
    align_loss, build_combos, build_pairs, cov_loss, edist_loss, embedding_combos, margin_loss, mreg_loss,
    pairwise_ranknet_loss, ranking_combos, ranknet_loss, LabelRule,
};
use ouiqa::model::Affine;
use proptest::prelude::*;

const CAP: usize = 100_000;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

/// Values on a coarse grid produce tied gaps; continuous values do not.
fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0..1.0f64, n),
        prop::collection::vec((0u8..=10).prop_map(|k| f64::from(k) / 10.0), n),
    ]
}

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    (2usize..=6).prop_flat_map(|n| {
        (
            values(n),
            values(n),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3).prop_map(unit), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pair_losses_match_enumeration((q, d, emb) in batch(), t in 0.0..0.3f64, tau in 0.2..2.0f64) {
        let r = ranknet_loss(&q, &d, t, CAP, 0);
        prop_assert!((r.value - common::ranknet(&q, &d, t)).abs() < 1e-10);
        prop_assert!((mreg_loss(&q, &d).value - common::mreg(&q, &d)).abs() < 1e-10);
        let e = edist_loss(&emb, &q, t, tau, CAP, 0);
        prop_assert!((e.value - common::edist(&emb, &q, t, tau)).abs() < 1e-10);
        prop_assert!((pairwise_ranknet_loss(&q, &d, t).value - common::pairwise(&q, &d, t)).abs() < 1e-10);
        prop_assert!((margin_loss(&q, &d, t, 0.1).value - common::margin(&q, &d, t, 0.1)).abs() < 1e-10);
        prop_assert!((cov_loss(&emb).unwrap().0 - common::cov(&emb)).abs() < 1e-10);
    }

    #[test]
    fn align_matches_direct_softmax((_q, _d, emb) in batch(), seed in any::<u64>(), tau in 0.0..3.0f64) {
        let n = emb.len();
        let mut rng = ouiqa::rng::SplitMix64::new(seed);
        let mut proj = Affine::zeros(4, 3);
        proj.w.iter_mut().for_each(|w| *w = rng.normal());
        proj.b.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        let text: Vec<Vec<f64>> = (0..n).map(|_| unit((0..4).map(|_| rng.normal()).collect())).collect();
        let got = align_loss(&emb, &text, &proj, tau).unwrap().value;
        let want = common::align(&emb, &text, &proj.w, &proj.b, tau);
        prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn stored_labels_match_gaps((q, d, _e) in batch(), t in 0.0..0.3f64) {
        for (set, rule) in [
            (ranking_combos(&d, t, CAP, 0), LabelRule::LargerGap),
            (embedding_combos(&q, t, CAP, 0), LabelRule::SmallerGap),
        ] {
            for c in &set.combos {
                prop_assert_eq!(set.label_of(c, rule), Some(c.y));
            }
        }
    }

    #[test]
    fn losses_ignore_batch_order((q, d, emb) in batch(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..q.len()).collect();
        ouiqa::rng::SplitMix64::new(seed).shuffle(&mut idx);
        let qp: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
        let dp: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
        let ep: Vec<Vec<f64>> = idx.iter().map(|&i| emb[i].clone()).collect();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        prop_assert!(close(ranknet_loss(&q, &d, 0.1, CAP, 0).value, ranknet_loss(&qp, &dp, 0.1, CAP, 0).value));
        prop_assert!(close(mreg_loss(&q, &d).value, mreg_loss(&qp, &dp).value));
        prop_assert!(close(edist_loss(&emb, &q, 0.05, 0.7, CAP, 0).value, edist_loss(&ep, &qp, 0.05, 0.7, CAP, 0).value));
        prop_assert!(close(cov_loss(&emb).unwrap().0, cov_loss(&ep).unwrap().0));
    }

    #[test]
    fn decreasing_scores_beat_increasing(d in prop::collection::vec(0.0..1.0f64, 2..8), a in 0.0..1.0f64, b in 0.01..3.0f64) {
        prop_assume!(d.iter().any(|&x| (x - d[0]).abs() > 1e-6));
        let down: Vec<f64> = d.iter().map(|x| a - b * x).collect();
        let up: Vec<f64> = d.iter().map(|x| a + b * x).collect();
        prop_assert!(mreg_loss(&down, &d).value < mreg_loss(&up, &d).value);
    }

    #[test]
    fn empty_sets_are_zero_and_finite(n in 1usize..7, v in 0.0..1.0f64, q in prop::collection::vec(0.0..1.0f64, 6)) {
        let d = vec![v; n];
        let q = &q[..n];
        for l in [ranknet_loss(q, &d, 0.1, CAP, 0), pairwise_ranknet_loss(q, &d, 0.1), margin_loss(q, &d, 0.1, 0.1)] {
            prop_assert!(l.empty);
            prop_assert_eq!(l.value, 0.0);
            prop_assert!(l.dq.iter().all(|&g| g == 0.0));
        }
        let emb = vec![vec![1.0, 0.0]; n];
        let flat = vec![0.5; n];
        let e = edist_loss(&emb, &flat, 0.05, 1.0, CAP, 0);
        prop_assert!(e.empty && e.value == 0.0 && e.d_tau == 0.0);
    }
}

#[test]
fn pairs_above_threshold_enumerated() {
    let p = build_pairs(&[0.0, 0.05, 0.5, 1.0], 0.1);
    let got: Vec<(usize, usize)> = p.pairs.iter().map(|p| (p.i, p.j)).collect();
    assert_eq!(got, vec![(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
}

#[test]
fn subsampling_keeps_a_subset_in_order() {
    let d: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
    let full = build_combos(build_pairs(&d, 0.1), LabelRule::LargerGap, CAP, 0);
    let few = build_combos(build_pairs(&d, 0.1), LabelRule::LargerGap, 10, 3);
    assert_eq!(few.combos.len(), 10);
    assert_eq!(few.sampled_from, full.combos.len());
    let pos: Vec<usize> = few
        .combos
        .iter()
        .map(|c| full.combos.iter().position(|f| f == c).expect("subset"))
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(few, build_combos(build_pairs(&d, 0.1), LabelRule::LargerGap, 10, 3));
}
