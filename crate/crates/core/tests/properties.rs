//! Randomized invariants of the matching engine, baselines, metrics and probe.

mod common;

use changekit::baselines::{cva_intensity, cva_match, mask_match, otsu_threshold};
use changekit::interchange::{BinaryMask, RleMask, Session, Time};
use changekit::matching::{
    bitemporal_latent_match, candidates, point_query_filter, Direction, MatchConfig, PointQuery, QueryPoint, Scoring,
};
use changekit::metrics::{mask_ar_masks, pixel_prf};
use changekit::probe::{fit_pca_up_to, semantic_query};
use changekit::robustness::apply_channel_gains;
use changekit::synthetic::{random_session, rect_mask, two_cluster_fixture, RandomSessionParams};
use changekit::ChangeProposal;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn session(seed: u64) -> Session {
    random_session(&mut ChaCha8Rng::seed_from_u64(seed), &RandomSessionParams::default())
}

fn keys(v: &[ChangeProposal]) -> Vec<(Time, u64)> {
    v.iter().map(|c| (c.source_time, c.proposal_id)).collect()
}

fn scaled(s: &Session, alpha: f32, time: Time) -> Session {
    let gains = vec![alpha; s.channels()];
    let (mut g0, mut g1) = (s.grid(Time::T0).clone(), s.grid(Time::T1).clone());
    match time {
        Time::T0 => g0 = apply_channel_gains(&g0, &gains).unwrap(),
        Time::T1 => g1 = apply_channel_gains(&g1, &gains).unwrap(),
    }
    Session::new(
        s.image_size(),
        g0,
        g1,
        s.proposals(Time::T0).to_vec(),
        s.proposals(Time::T1).to_vec(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_is_prefix_of_full_ranking(seed in any::<u64>(), k in 1usize..120) {
        let s = session(seed);
        let full = bitemporal_latent_match(&s, &MatchConfig::threshold(0.0)).unwrap();
        let top = bitemporal_latent_match(&s, &MatchConfig::top_k(k)).unwrap();
        prop_assert_eq!(top.len(), k.min(full.len()));
        prop_assert_eq!(&full[..top.len()], &top[..]);
        prop_assert!(full.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn raising_the_threshold_never_adds(seed in any::<u64>(), a in 0.0f64..180.0, b in 0.0f64..180.0) {
        let s = session(seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = keys(&bitemporal_latent_match(&s, &MatchConfig::threshold(lo)).unwrap());
        let strict = keys(&bitemporal_latent_match(&s, &MatchConfig::threshold(hi)).unwrap());
        prop_assert!(strict.iter().all(|k| loose.contains(k)));
    }

    #[test]
    fn bidirectional_count_is_both_sides(seed in any::<u64>()) {
        let s = session(seed);
        for scoring in [Scoring::Cosine, Scoring::Eq1Raw] {
            let all = candidates(&s, scoring, Direction::Bidirectional).unwrap();
            prop_assert_eq!(all.len(), s.proposals(Time::T0).len() + s.proposals(Time::T1).len());
        }
    }

    #[test]
    fn point_query_output_is_a_subset(seed in any::<u64>(), angle in 0.0f64..180.0) {
        let s = session(seed);
        let Some(p) = s.proposals(Time::T0).first() else { return Ok(()) };
        let (cx, cy) = p.mask.centroid().unwrap();
        let point = QueryPoint { x: cx.floor() as usize, y: cy.floor() as usize, time: Time::T0 };
        let changes = bitemporal_latent_match(&s, &MatchConfig::threshold(0.0)).unwrap();
        let kept = point_query_filter(&changes, &PointQuery::new(vec![point]).with_angle(angle), &s).unwrap();
        prop_assert!(kept.iter().all(|c| changes.contains(c)));
        let all = point_query_filter(&changes, &PointQuery::new(vec![point]).with_angle(180.0), &s).unwrap();
        prop_assert_eq!(all, changes);
    }

    #[test]
    fn cosine_ranking_ignores_positive_scaling(seed in any::<u64>(), alpha in 0.01f32..100.0, post in any::<bool>()) {
        let s = session(seed);
        let t = if post { Time::T1 } else { Time::T0 };
        let before = bitemporal_latent_match(&s, &MatchConfig::threshold(0.0)).unwrap();
        let after = bitemporal_latent_match(&scaled(&s, alpha, t), &MatchConfig::threshold(0.0)).unwrap();
        prop_assert_eq!(before.len(), after.len());
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            prop_assert!((a.score - b.score).abs() <= 1e-6);
            // positions may only differ inside a block of equal scores
            if (a.source_time, a.proposal_id) != (b.source_time, b.proposal_id) {
                let near = |j: usize| before.get(j).is_some_and(|c| (c.score - a.score).abs() <= 1e-9);
                prop_assert!(near(i + 1) || (i > 0 && near(i - 1)), "rank {} moved", i);
            }
        }
    }

    #[test]
    fn mask_match_is_symmetric_under_swap(seed in any::<u64>(), iou in 0.1f64..0.9) {
        let s = session(seed);
        let masks = |v: Vec<ChangeProposal>| {
            let mut m: Vec<Vec<u32>> = v.iter().map(|c| c.mask.counts().to_vec()).collect();
            m.sort();
            m
        };
        prop_assert_eq!(masks(mask_match(&s, iou).unwrap()), masks(mask_match(&s.swapped(), iou).unwrap()));
    }

    #[test]
    fn cva_match_shrinks_as_votes_rise(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = session(seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = keys(&cva_match(&s, lo).unwrap());
        let strict = keys(&cva_match(&s, hi).unwrap());
        prop_assert!(strict.iter().all(|k| loose.contains(k)));
    }

    #[test]
    fn cva_intensity_is_symmetric(seed in any::<u64>()) {
        let s = session(seed);
        let ab = cva_intensity(s.grid(Time::T0), s.grid(Time::T1)).unwrap();
        let ba = cva_intensity(s.grid(Time::T1), s.grid(Time::T0)).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn semantic_query_ignores_positive_scaling(seed in any::<u64>(), alpha in 0.01f32..100.0) {
        let s = session(seed);
        let props = s.proposals(Time::T0);
        let Some(q) = props.first() else { return Ok(()) };
        let grid = s.grid(Time::T0);
        let big = apply_channel_gains(grid, &vec![alpha; grid.channels()]).unwrap();
        let a = semantic_query(grid, props, q.id, usize::MAX).unwrap();
        let b = semantic_query(&big, props, q.id, usize::MAX).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.similarity - y.similarity).abs() <= 1e-6);
        }
    }

    #[test]
    fn pca_directions_are_orthonormal(seed in any::<u64>()) {
        let s = session(seed);
        let g = s.grid(Time::T0);
        prop_assume!(g.height() * g.width() >= 2);
        let basis = fit_pca_up_to(s.grid(Time::T0), 3).unwrap();
        for (i, u) in basis.directions.iter().enumerate() {
            for (j, v) in basis.directions.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-6, "<u{},u{}> = {}", i, j, dot);
            }
        }
        prop_assert!(basis.explained.windows(2).all(|w| w[0] >= w[1] - 1e-9));
        let centre = basis.project(&basis.mean.iter().map(|&m| m as f32).collect::<Vec<_>>());
        prop_assert!(centre.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn prf_swap_exchanges_precision_and_recall(
        (h, w, a, b) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w), proptest::collection::vec(any::<bool>(), h * w))
        })
    ) {
        let (p, g) = (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap());
        let x = pixel_prf(&p, &g).unwrap();
        let y = pixel_prf(&g, &p).unwrap();
        prop_assert_eq!((x.precision, x.recall, x.f1), (y.recall, y.precision, y.f1));
    }

    #[test]
    fn appending_a_prediction_never_lowers_ar(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = random_instance(&mut rng);
        let extra = random_rect(&mut rng, (8, 8));
        let mut more = preds.clone();
        more.push(extra);
        let ar = |p: &[RleMask]| mask_ar_masks(&p.iter().collect::<Vec<_>>(), &gts, 1000).unwrap().ar;
        prop_assert!(ar(&more) >= ar(&preds));
        let greedy = common::greedy_matches(&preds, &gts, 1000);
        let best = common::optimal_matches(&preds, &gts);
        prop_assert!(greedy.iter().zip(&best).all(|(g, b)| g <= b));
    }
}

fn random_rect(rng: &mut ChaCha8Rng, size: (usize, usize)) -> RleMask {
    use rand::Rng;
    let (h, w) = (rng.gen_range(1..=size.0), rng.gen_range(1..=size.1));
    rect_mask(size, rng.gen_range(0..=size.0 - h), rng.gen_range(0..=size.1 - w), h, w)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<RleMask>, Vec<RleMask>) {
    use rand::Rng;
    let n_gt = rng.gen_range(1..=3);
    let n_pred = rng.gen_range(0..=3);
    let gts = (0..n_gt).map(|_| random_rect(rng, (8, 8))).collect();
    let preds = (0..n_pred).map(|_| random_rect(rng, (8, 8))).collect();
    (preds, gts)
}

#[test]
fn bimodal_values_split_between_the_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (Normal::new(2.0, 0.5).unwrap(), Normal::new(8.0, 0.5).unwrap());
    let values: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) }).collect();
    let t = otsu_threshold(&values, 256, None).unwrap();
    assert!(t > 3.5 && t < 6.5, "threshold {t}");
}

#[test]
fn fixture_grids_are_demodulated() {
    let f = two_cluster_fixture();
    for t in Time::BOTH {
        let g = f.session.grid(t);
        assert!(g.is_demodulated());
        assert_eq!(g.demodulation_violations().0, 0);
        let d = g.channels() as f64;
        for v in g.vectors() {
            let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / d;
            let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!(mean.abs() < 1e-3 && (norm - d.sqrt()).abs() <= 1e-2 * d.sqrt());
        }
    }
}

#[test]
fn fixture_uniform_change_over_a_mask_is_detected() {
    let f = two_cluster_fixture();
    let changes = bitemporal_latent_match(&f.session, &MatchConfig::default()).unwrap();
    let mut got = keys(&changes);
    let mut want = f.changed();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    // a lone pixel still lands on a cell
    let tiny = rect_mask((128, 128), 64, 64, 1, 1);
    assert!(!changekit::proposal::project_mask_to_grid(&tiny, (8, 8)).unwrap().cells.is_empty());
}
