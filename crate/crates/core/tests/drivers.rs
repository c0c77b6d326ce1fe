use fbsde_core::drivers::*;
use fbsde_core::error::Error;
use fbsde_core::timegrid::{Hurst, TimeGrid};
use rand::Rng;

#[test]
fn generator_validation() {
    assert!(GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).is_ok());
    assert!(GeneratorMatrix::new(&[vec![-1.0, 2.0], vec![1.0, -1.0]]).is_err());
    assert!(GeneratorMatrix::new(&[vec![1.0, -1.0], vec![1.0, -1.0]]).is_err());
    assert!(GeneratorMatrix::new(&[vec![0.0]]).is_ok());
    assert!(GeneratorMatrix::<f64>::new(&[]).is_err());
}

#[test]
fn pair_indexing_matches_pair_list() {
    let q = GeneratorMatrix::new(&[
        vec![-2.0, 1.0, 1.0],
        vec![0.5, -1.0, 0.5],
        vec![0.0, 3.0, -3.0],
    ])
    .unwrap();
    for (idx, (i, j)) in q.pairs().into_iter().enumerate() {
        assert_eq!(q.pair_index(i, j).unwrap(), idx);
    }
    assert!(matches!(q.pair_index(1, 1), Err(Error::InvalidPair(1, 1))));
}

#[test]
fn substreams_are_distinct_and_reproducible() {
    let a: u64 = substream(9, StreamTag::Brownian, 3).gen();
    let b: u64 = substream(9, StreamTag::Brownian, 3).gen();
    let c: u64 = substream(9, StreamTag::Fbm, 3).gen();
    let d: u64 = substream(9, StreamTag::Brownian, 4).gen();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
}

#[test]
fn single_jump_unrolled() {
    let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let q = GeneratorMatrix::new(&[vec![-2.0, 2.0], vec![0.0, 0.0]]).unwrap();
    let regimes =
        RegimePaths::from_jumps(&grid, 2, vec![RegimePath { initial: 0, jumps: vec![(0.3, 1)] }]).unwrap();
    let mart = compensated_martingales(&regimes, &q, &grid).unwrap();
    let idx = mart.pair(0, 1).unwrap();
    let total: f64 = (0..4).map(|k| mart.increments.get(0, k, idx)).sum();
    assert!((total - (1.0 - 2.0 * 0.3)).abs() < 1e-14);
    assert_eq!(regimes.at(0, 1), 0);
    assert_eq!(regimes.at(0, 2), 1);
    assert!(mart.pair(1, 1).is_err());
}

#[test]
fn absorbing_chain_is_constant() {
    let grid = TimeGrid::new(0.0, 3.0, 30).unwrap();
    let q = GeneratorMatrix::trivial();
    let r = simulate_regime_path(&grid, &q, 0, 10, 1).unwrap();
    assert!(r.nodes.iter().all(|&s| s == 0));
    let mart = compensated_martingales(&r, &q, &grid).unwrap();
    assert_eq!(mart.increments.dim(), 0);
}

#[test]
fn fbm_is_pinned_and_deterministic() {
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let h = Hurst::new(0.7).unwrap();
    let a = simulate_fbm(&grid, h, 5, 11).unwrap();
    let b = simulate_fbm(&grid, h, 5, 11).unwrap();
    assert_eq!(a.values, b.values);
    for p in 0..5 {
        assert_eq!(a.value(p, 0), 0.0);
    }
}

#[test]
fn covariance_formula_and_table() {
    let h = Hurst::<f64>::new(0.75).unwrap();
    assert!((fbm_covariance(1.0, 1.0, h) - 1.0).abs() < 1e-15);
    assert!((fbm_covariance(2.0, 2.0, h) - 2f64.powf(1.5)).abs() < 1e-12);
    assert_eq!(fbm_covariance(0.0, 1.0, h), 0.0);
    let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
    let f = simulate_fbm(&grid, h, 4000, 3).unwrap();
    let table = fbm_covariance_table(&f, &[0.5, 1.0, 2.0]).unwrap();
    assert_eq!(table.len(), 6);
    assert!(table.iter().all(|e| e.z_score() < 5.0), "{table:?}");
    assert!(fbm_covariance_table(&f, &[0.51]).is_err());
}
