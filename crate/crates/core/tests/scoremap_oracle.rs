use msmc::decompose::{PatchGrid, Scale, WindowSpec};
use msmc::scoremap::{
    accumulate_harmonic, fuse_few_shot_final, fuse_three_scale, fuse_zero_shot, FinalWeights, ScaleWeights, ScoreMap,
    WindowScore, ZeroShotWeights, HARMONIC_EPSILON,
};
use proptest::prelude::*;

/// Per-pixel accumulation written from the definition: visit every pixel, scan every window.
fn naive_harmonic(scores: &[WindowScore], grid: &PatchGrid) -> Vec<f64> {
    let p = grid.patch_size;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut t = 0.0;
            let mut inv = 0.0;
            for s in scores {
                let win = &s.window;
                let inside = y >= win.row0 * p && y < (win.row0 + win.rows) * p && x >= win.col0 * p && x < (win.col0 + win.cols) * p;
                if inside {
                    t += 1.0;
                    inv += 1.0 / s.score.max(HARMONIC_EPSILON);
                }
            }
            if t > 0.0 {
                out[y * w + x] = t / inv;
            }
        }
    }
    out
}

fn fixture() -> impl Strategy<Value = (PatchGrid, Vec<WindowScore>)> {
    (1usize..=16, 1usize..=16, 1usize..=3).prop_flat_map(|(rows, cols, patch)| {
        let grid = PatchGrid::new(patch, rows, cols).unwrap();
        let window = (0..rows, 0..cols, 1usize..=rows, 1usize..=cols, 0.0f64..1.0).prop_map(move |(r, c, hr, wc, s)| {
            let hr = hr.min(rows - r);
            let wc = wc.min(cols - c);
            WindowScore {
                window: WindowSpec { scale: Scale::Small, row0: r, col0: c, rows: hr, cols: wc },
                score: s,
            }
        });
        (Just(grid), prop::collection::vec(window, 0..=50))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn harmonic_matches_naive_accumulator((grid, scores) in fixture()) {
        let fast = accumulate_harmonic(&scores, &grid).unwrap();
        let slow = naive_harmonic(&scores, &grid);
        for (a, b) in fast.values().iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn harmonic_ignores_window_order((grid, mut scores) in fixture()) {
        let before = accumulate_harmonic(&scores, &grid).unwrap();
        scores.reverse();
        let after = accumulate_harmonic(&scores, &grid).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn harmonic_stays_within_covering_scores((grid, scores) in fixture()) {
        let map = accumulate_harmonic(&scores, &grid).unwrap();
        let max = scores.iter().map(|s| s.score.max(HARMONIC_EPSILON)).fold(0.0, f64::max);
        for &v in map.values() {
            prop_assert!(v <= max + 1e-12);
        }
    }
}

#[test]
fn two_windows_give_closed_form_in_overlap() {
    let grid = PatchGrid::new(1, 1, 3).unwrap();
    let win = |col0| WindowSpec { scale: Scale::Small, row0: 0, col0, rows: 1, cols: 2 };
    let map = accumulate_harmonic(
        &[WindowScore { window: win(0), score: 0.2 }, WindowScore { window: win(1), score: 0.6 }],
        &grid,
    )
    .unwrap();
    // 2 / (1/0.2 + 1/0.6) = 2 / (5 + 5/3) = 0.3
    assert!((map.get(0, 1) - 0.3).abs() < 1e-15);
    assert_eq!(map.get(0, 0), 0.2);
    assert_eq!(map.get(0, 2), 0.6);
}

#[test]
fn default_fusions_on_unit_maps() {
    let one = ScoreMap::filled(4, 4, 1.0).unwrap();
    let z = fuse_zero_shot(&one, &one, 1.0, ZeroShotWeights::default()).unwrap();
    assert!(z.values().iter().all(|&v| v == 2.0));
    let g = fuse_three_scale(&one, &one, &one, ScaleWeights::GLOBAL).unwrap();
    let i = fuse_three_scale(&one, &one, &one, ScaleWeights::INDIVIDUAL).unwrap();
    assert!(g.values().iter().all(|&v| v == 3.0));
    assert!(i.values().iter().all(|&v| v == 8.0));
    let f = fuse_few_shot_final(&one, &one, 1.0, FinalWeights::default()).unwrap();
    assert!(f.values().iter().all(|&v| v == 1.0));
}

#[test]
fn fusion_rejects_shape_mismatch_and_negative_factor() {
    let a = ScoreMap::zeros(2, 2);
    let b = ScoreMap::zeros(2, 3);
    assert!(matches!(fuse_zero_shot(&a, &b, 1.0, ZeroShotWeights::default()), Err(msmc::Error::ContractViolation(_))));
    assert!(fuse_few_shot_final(&a, &a, -1.0, FinalWeights::default()).is_err());
}

#[test]
fn window_outside_grid_is_a_contract_violation() {
    let grid = PatchGrid::new(16, 2, 2).unwrap();
    let bad = WindowScore {
        window: WindowSpec { scale: Scale::Small, row0: 1, col0: 1, rows: 2, cols: 2 },
        score: 0.5,
    };
    assert!(matches!(accumulate_harmonic(&[bad], &grid), Err(msmc::Error::ContractViolation(_))));
}
