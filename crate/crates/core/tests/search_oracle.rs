use msmc::decompose::Scale;
use msmc::membank::{subsample, BankKind, MemoryBank, Provenance};
use msmc::Embedding;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Embedding::normalized(v).unwrap()
}

fn bank_of(rows: &[Embedding]) -> MemoryBank {
    let prov = (0..rows.len())
        .map(|i| Provenance { image: 0, augmentation: 0, object: 0, window: i as u32 })
        .collect();
    MemoryBank::from_embeddings(BankKind::Global, Scale::Small, rows, prov).unwrap()
}

/// Double loop in f64 over the stored f32 rows; lowest index wins ties.
fn oracle(bank: &MemoryBank, q: &Embedding) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for i in 0..bank.len() {
        let dot: f64 = bank.row(i).iter().zip(q.as_slice()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        if dot > best.0 {
            best = (dot, i);
        }
    }
    (((1.0 - best.0) / 2.0).clamp(0.0, 1.0), best.1)
}

#[test]
fn exact_against_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (rows, dim) in [(5000, 64), (3000, 640)] {
        let data: Vec<Embedding> = (0..rows).map(|_| random_unit(&mut rng, dim)).collect();
        let bank = bank_of(&data);
        // half random queries, half perturbed bank rows so that near-ties are common
        let queries: Vec<Embedding> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    random_unit(&mut rng, dim)
                } else {
                    let base = &data[rng.random_range(0..rows)];
                    let v = base.as_slice().iter().map(|x| x + 1e-4 * rng.sample::<f32, _>(StandardNormal)).collect();
                    Embedding::normalized(v).unwrap()
                }
            })
            .collect();
        let got = bank.query_many(&queries).unwrap();
        for (q, g) in queries.iter().zip(&got) {
            let (d, row) = oracle(&bank, q);
            assert!((g.distance - d).abs() <= 1e-12, "dim {dim}: {} vs {d}", g.distance);
            assert_eq!(g.nearest_row, row);
        }
    }
}

#[test]
fn duplicate_rows_resolve_to_lowest_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_unit(&mut rng, 32);
    let b = random_unit(&mut rng, 32);
    let bank = bank_of(&[b.clone(), a.clone(), b, a.clone()]);
    let hit = bank.query(&a).unwrap();
    assert_eq!(hit.nearest_row, 1);
    assert!(hit.distance <= 1e-7);
}

#[test]
fn query_spans_several_row_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<Embedding> = (0..7000).map(|_| random_unit(&mut rng, 16)).collect();
    let bank = bank_of(&data);
    for target in [0, 2047, 2048, 6999] {
        let hit = bank.query(&data[target]).unwrap();
        assert_eq!(hit.nearest_row, target);
    }
}

#[test]
fn dim_mismatch_and_empty_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bank = bank_of(&[random_unit(&mut rng, 16)]);
    assert!(matches!(bank.query(&random_unit(&mut rng, 8)), Err(msmc::Error::ContractViolation(_))));
    assert!(bank.query_many(&[]).unwrap().is_empty());
}

#[test]
fn subsample_keeps_order_and_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<Embedding> = (0..500).map(|_| random_unit(&mut rng, 8)).collect();
    let bank = bank_of(&data);
    let a = subsample(&bank, 100, 42).unwrap();
    let b = subsample(&bank, 100, 42).unwrap();
    let c = subsample(&bank, 100, 43).unwrap();
    assert_eq!(a.len(), 100);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let windows: Vec<u32> = a.provenance().iter().map(|p| p.window).collect();
    assert!(windows.windows(2).all(|w| w[0] < w[1]));
    for (i, p) in a.provenance().iter().enumerate() {
        assert_eq!(a.row(i), bank.row(p.window as usize));
    }
    assert_eq!(subsample(&bank, 1000, 0).unwrap(), bank);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Removing rows never brings a query closer to the bank.
    #[test]
    fn distances_are_monotone_in_bank_content(seed in any::<u64>(), n in 2usize..60, keep in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 12)).collect();
        let full = bank_of(&data);
        let part = subsample(&full, keep.min(n), seed).unwrap();
        let queries: Vec<Embedding> = (0..8).map(|_| random_unit(&mut rng, 12)).collect();
        let df = full.query_many(&queries).unwrap();
        let dp = part.query_many(&queries).unwrap();
        for (f, p) in df.iter().zip(&dp) {
            prop_assert!(p.distance >= f.distance);
        }
    }
}
