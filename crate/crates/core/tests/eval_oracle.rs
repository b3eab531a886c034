use msmc::decompose::BinaryMask;
use msmc::eval::{auroc, category_metrics, f1_max, f1_seg, LabeledScore, MetricsReport, SegSweep};
use msmc::ScoreMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tries every distinct score as a threshold, counting from scratch each time.
fn naive_f1(items: &[LabeledScore]) -> (f64, f64) {
    let mut thresholds: Vec<f64> = items.iter().map(|s| s.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = (-1.0, f64::NAN);
    for &t in &thresholds {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for s in items {
            match (s.score >= t, s.label) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = tp / (tp + fn_);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.0 + 1e-15 {
            best = (f1, t);
        }
    }
    best
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting one half.
fn naive_auroc(items: &[LabeledScore]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in items.iter().filter(|s| s.label) {
        for n in items.iter().filter(|s| !s.label) {
            den += 1.0;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    num / den
}

fn random_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledScore> {
    // coarse scores so that ties are frequent
    let levels = rng.random_range(2..40);
    let mut v: Vec<LabeledScore> = (0..n)
        .map(|_| LabeledScore::new(rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.3)))
        .collect();
    v[0].label = true;
    v[1].label = false;
    v
}

#[test]
fn f1_and_auroc_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let n = rng.random_range(2..200);
        let items = random_items(&mut rng, n);
        let got = f1_max(&items).unwrap();
        let (f1, t) = naive_f1(&items);
        assert!((got.f1 - f1).abs() <= 1e-12);
        assert_eq!(got.threshold, t);
        assert!((auroc(&items).unwrap() - naive_auroc(&items)).abs() <= 1e-12);
    }
}

#[test]
fn perfect_separation_scores_one() {
    let items: Vec<LabeledScore> = (0..50).map(|i| LabeledScore::new(i as f64, i >= 30)).collect();
    assert_eq!(f1_max(&items).unwrap().f1, 1.0);
    assert_eq!(f1_max(&items).unwrap().threshold, 30.0);
    assert_eq!(auroc(&items).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn f1_is_invariant_under_monotone_transforms(seed in any::<u64>(), n in 2usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = random_items(&mut rng, n);
        let warped: Vec<LabeledScore> = items.iter().map(|s| LabeledScore::new((3.0 * s.score).exp() - 7.0, s.label)).collect();
        let a = f1_max(&items).unwrap();
        let b = f1_max(&warped).unwrap();
        prop_assert_eq!(a.f1, b.f1);
        prop_assert!((0.0..=1.0).contains(&a.f1));
        let r = auroc(&items).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

fn random_map(rng: &mut ChaCha8Rng, side: usize) -> (ScoreMap, BinaryMask) {
    let values = (0..side * side).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = (0..side * side).map(|_| rng.random_bool(0.2)).collect();
    let gt = BinaryMask::new(side, side, labels).unwrap();
    (ScoreMap::new(side, side, values).unwrap(), gt)
}

#[test]
fn exact_segmentation_sweep_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..4 {
        let maps: Vec<_> = (0..2).map(|_| random_map(&mut rng, 24)).collect();
        let got = f1_seg(&maps, SegSweep::Exact).unwrap();
        let items: Vec<LabeledScore> = maps
            .iter()
            .flat_map(|(m, g)| m.values().iter().zip(g.data()).map(|(&s, &l)| LabeledScore::new(s, l)))
            .collect();
        let (f1, _) = naive_f1(&items);
        assert!((got.f1 - f1).abs() <= 1e-6);
    }
}

#[test]
fn quantile_sweep_is_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let maps: Vec<_> = (0..4).map(|_| random_map(&mut rng, 64)).collect();
    let exact = f1_seg(&maps, SegSweep::Exact).unwrap();
    let quick = f1_seg(&maps, SegSweep::default()).unwrap();
    assert!(quick.f1 <= exact.f1);
    assert!(exact.f1 - quick.f1 < 1e-3);
}

#[test]
fn perfect_and_constant_maps() {
    let gt = BinaryMask::from_fn(10, 10, |y, x| y < 3 && x < 5);
    let perfect = ScoreMap::new(10, 10, gt.data().iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
    assert_eq!(f1_seg(&[(perfect, gt.clone())], SegSweep::default()).unwrap().f1, 1.0);
    // predict-all-positive: 2p / (p + 1) with p = 15/100
    let constant = ScoreMap::filled(10, 10, 0.4).unwrap();
    let f1 = f1_seg(&[(constant, gt)], SegSweep::default()).unwrap().f1;
    assert!((f1 - 2.0 * 0.15 / 1.15).abs() < 1e-12);
}

#[test]
fn mismatched_ground_truth_is_rejected() {
    let m = ScoreMap::zeros(4, 4);
    let g = BinaryMask::empty(4, 5);
    assert!(matches!(f1_seg(&[(m, g)], SegSweep::Exact), Err(msmc::Error::ContractViolation(_))));
}

#[test]
fn report_means_skip_undefined_metrics() {
    let good = category_metrics(&[LabeledScore::new(0.9, true), LabeledScore::new(0.1, false)], None, SegSweep::default()).unwrap();
    let one_class = category_metrics(&[LabeledScore::new(0.9, false)], None, SegSweep::default()).unwrap();
    assert!(one_class.f1_cls.is_none());
    let report = MetricsReport::new([("a".to_string(), good), ("b".to_string(), one_class)].into_iter().collect());
    assert_eq!(report.mean.f1_cls, Some(1.0));
    assert_eq!(report.mean.f1_seg, None);
    let json = report.to_json().unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), report);
}
