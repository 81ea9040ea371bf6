use mdn_core::eval::*;
use mdn_core::mixture::Point;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

// Exhaustive maximum-cardinality matching within `radius`.
fn brute_force(dets: &[Point], gts: &[Point], radius: f64) -> usize {
    fn go(i: usize, dets: &[Point], gts: &[Point], used: &mut Vec<bool>, radius: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, gts, used, radius);
        for j in 0..gts.len() {
            if !used[j] && dist(dets[i], gts[j]) <= radius {
                used[j] = true;
                best = best.max(1 + go(i + 1, dets, gts, used, radius));
                used[j] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], radius)
}

fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent)])
        .collect()
}

fn check_result(r: &MatchResult, dets: &[Point], gts: &[Point], radius: f64) {
    let mut seen_d = vec![false; dets.len()];
    let mut seen_g = vec![false; gts.len()];
    for &(d, g, dd) in &r.pairs {
        assert!(dd <= radius);
        assert!((dd - dist(dets[d], gts[g])).abs() < 1e-12);
        assert!(!seen_d[d] && !seen_g[g]);
        seen_d[d] = true;
        seen_g[g] = true;
    }
    for &d in &r.false_positives {
        assert!(!seen_d[d]);
        seen_d[d] = true;
    }
    for &g in &r.false_negatives {
        assert!(!seen_g[g]);
        seen_g[g] = true;
    }
    assert!(seen_d.iter().all(|&s| s) && seen_g.iter().all(|&s| s));
}

#[test]
fn assignment_matches_brute_force_cardinality() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..500 {
        let n = rng.random_range(0..=6);
        let dets = random_points(&mut rng, n, 30.0);
        let n = rng.random_range(0..=6);
        let gts = random_points(&mut rng, n, 30.0);
        let r = match_points(&dets, &gts, 6.0);
        check_result(&r, &dets, &gts, 6.0);
        assert_eq!(
            r.pairs.len(),
            brute_force(&dets, &gts, 6.0),
            "{dets:?} {gts:?}"
        );
        let greedy = greedy_match(&dets, &gts, 6.0);
        check_result(&greedy, &dets, &gts, 6.0);
        assert!(greedy.pairs.len() <= r.pairs.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matching_is_symmetric(seed in any::<u64>(), nd in 0usize..7, ng in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_points(&mut rng, nd, 25.0);
        let gts = random_points(&mut rng, ng, 25.0);
        let a = match_points(&dets, &gts, 6.0);
        let b = match_points(&gts, &dets, 6.0);
        prop_assert_eq!(a.pairs.len(), b.pairs.len());
        let total = |r: &MatchResult| r.pairs.iter().map(|p| p.2).sum::<f64>();
        prop_assert!((total(&a) - total(&b)).abs() < 1e-9);
        prop_assert_eq!(a.false_positives.len(), b.false_negatives.len());
    }

    #[test]
    fn micro_average_ignores_grouping(seed in any::<u64>(), images in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut results = Vec::new();
        for _ in 0..images {
            let n = rng.random_range(0..8);
        let dets = random_points(&mut rng, n, 40.0);
            let n = rng.random_range(0..8);
        let gts = random_points(&mut rng, n, 40.0);
            results.push(match_points(&dets, &gts, 6.0));
        }
        let per_image = metrics(&results);
        // One combined result with the same counts.
        let merged = MatchResult {
            pairs: results.iter().flat_map(|r| r.pairs.iter().copied()).collect(),
            false_positives: results.iter().flat_map(|r| r.false_positives.iter().copied()).collect(),
            false_negatives: results.iter().flat_map(|r| r.false_negatives.iter().copied()).collect(),
        };
        let pooled = metrics(&[merged]);
        prop_assert_eq!(per_image.totals, pooled.totals);
        prop_assert_eq!(per_image.f1, pooled.f1);
        prop_assert_eq!(per_image.per_image.len(), images);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let c = Counts { tp, fp, fn_ };
        let (p, r, f) = (c.precision(), c.recall(), c.f1());
        prop_assert!((0.0..=1.0).contains(&f));
        if p > 0.0 && r > 0.0 {
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        } else {
            prop_assert_eq!(f, 0.0);
        }
    }
}
