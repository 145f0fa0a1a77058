use amq::assign::{assign_quant, bucket_sizes, check_partition, stable_argsort, BitAllocation, ComplexityField};
use proptest::prelude::*;

fn ratios_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..=20, k).prop_filter_map("all zero", |raw| {
        let s: u32 = raw.iter().sum();
        (s > 0).then(|| raw.iter().map(|&r| r as f64 / s as f64).collect())
    })
}

fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
    // small integer grid gives plenty of ties
    prop::collection::vec((0u32..8).prop_map(|v| v as f64 / 4.0), 0..60)
}

fn check_all(w: &[f64], levels: &[u32], ratios: &[f64]) -> Result<(), TestCaseError> {
    let n = w.len();
    let b = assign_quant(w, levels, ratios).unwrap();
    prop_assert!(check_partition(&b, n, "node").is_ok());
    let k = levels.len();
    for i in 0..k - 1 {
        prop_assert_eq!(b[i].len(), (n as f64 * ratios[i] + 1e-9).floor() as usize);
    }
    // monotone with (value, index) tie-breaking across consecutive buckets
    let key = |i: usize| (w[i], i);
    for i in 0..k {
        for j in i + 1..k {
            for &x in &b[i] {
                for &y in &b[j] {
                    prop_assert!(key(x).0 < key(y).0 || (key(x).0 == key(y).0 && x < y));
                }
            }
        }
    }
    // scale invariance
    let scaled: Vec<f64> = w.iter().map(|v| v * 3.7).collect();
    prop_assert_eq!(assign_quant(&scaled, levels, ratios).unwrap(), b.clone());
    // bit budget: generic slack bound
    let used: u64 = b.iter().zip(levels).map(|(s, &l)| s.len() as u64 * u64::from(l)).sum();
    let ideal: f64 = n as f64 * ratios.iter().zip(levels).map(|(r, &l)| r * f64::from(l)).sum::<f64>();
    let top = levels[k - 1];
    let slack: u32 = levels[..k - 1].iter().map(|&l| top - l).sum();
    prop_assert!(used as f64 <= (ideal + 1e-6).floor() + f64::from(slack));
    if slack <= top {
        prop_assert!(used as f64 <= (ideal + 1e-6).floor() + f64::from(top));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn two_level_invariants(w in weights_strategy(), r in ratios_strategy(2)) {
        check_all(&w, &[4, 8], &r)?;
    }

    #[test]
    fn three_level_invariants(w in weights_strategy(), r in ratios_strategy(3)) {
        check_all(&w, &[4, 8, 12], &r)?;
    }

    #[test]
    fn permutation_equivariance(w in weights_strategy(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        // distinct weights so that the permuted order is the permuted argsort
        let w: Vec<f64> = w.iter().enumerate().map(|(i, v)| v + i as f64 * 1e-6).collect();
        let mut perm: Vec<usize> = (0..w.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pw: Vec<f64> = perm.iter().map(|&p| w[p]).collect();
        let a = assign_quant(&w, &[4, 8], &[0.5, 0.5]).unwrap();
        let b = assign_quant(&pw, &[4, 8], &[0.5, 0.5]).unwrap();
        for (ba, bb) in a.iter().zip(&b) {
            let mut mapped: Vec<usize> = bb.iter().map(|&i| perm[i]).collect();
            mapped.sort();
            let mut orig = ba.clone();
            orig.sort();
            prop_assert_eq!(mapped, orig);
        }
    }
}

#[test]
fn remainder_goes_to_top_bucket() {
    assert_eq!(bucket_sizes(5, &[0.5, 0.5]), vec![2, 3]);
    assert_eq!(bucket_sizes(10, &[0.3, 0.3, 0.4]), vec![3, 3, 4]);
    assert_eq!(bucket_sizes(7, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), vec![2, 2, 3]);
    assert_eq!(bucket_sizes(0, &[0.5, 0.5]), vec![0, 0]);
}

#[test]
fn ties_break_by_index() {
    assert_eq!(stable_argsort(&[1.0, 0.0, 1.0, 0.0]), vec![1, 3, 0, 2]);
    let b = assign_quant(&[0.0; 4], &[4, 8], &[0.5, 0.5]).unwrap();
    assert_eq!(b, vec![vec![0, 1], vec![2, 3]]);
}

#[test]
fn loose_budget_bound_fails_for_wide_level_gaps() {
    // with levels far apart the flooring remainder can exceed one top-level slot
    let levels = [2, 4, 16];
    let ratios = [0.4999, 0.4999, 0.0002];
    let w: Vec<f64> = (0..100).map(f64::from).collect();
    let b = assign_quant(&w, &levels, &ratios).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![49, 49, 2]);
    let used: u32 = b.iter().zip(levels).map(|(s, l)| s.len() as u32 * l).sum();
    let ideal: f64 = 100.0 * ratios.iter().zip(levels).map(|(r, l)| r * f64::from(l)).sum::<f64>();
    assert_eq!(used, 326);
    assert!(f64::from(used) > ideal.floor() + 16.0);
}

#[test]
fn allocation_covers_edges_with_same_ratios() {
    let w = ComplexityField::new(vec![0.9, 0.1, 0.5, 0.3]).unwrap();
    let edges = vec![(1, 0), (0, 1), (3, 2), (2, 3), (0, 0), (1, 1)];
    let a = BitAllocation::from_weights(&w, &edges, None, &[4, 8], &[0.5, 0.5]).unwrap();
    assert_eq!(a.node_buckets, vec![vec![1, 3], vec![2, 0]]);
    // edge weights by target: [0.9, 0.1, 0.5, 0.3, 0.9, 0.1]
    assert_eq!(a.edge_buckets, vec![vec![1, 5, 3], vec![2, 0, 4]]);
    assert!(a.validate(4, 6).is_ok());
    assert_eq!(a.node_histogram(), vec![2, 2]);
}
