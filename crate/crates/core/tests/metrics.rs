use proptest::prelude::*;

use pkrank::metrics::{krcc, lcc, mid_ranks, srcc};

/// Kendall tau-b from all O(n^2) pairs.
fn brute_krcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut s, mut tx, mut ty, mut n0) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            n0 += 1.0;
            let dx = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let dy = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            s += dx * dy;
            if dx == 0.0 {
                tx += 1.0;
            }
            if dy == 0.0 {
                ty += 1.0;
            }
        }
    }
    s / ((n0 - tx) * (n0 - ty)).sqrt()
}

/// Average rank by counting smaller and equal elements.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn brute_srcc(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Small integer grid so ties are common.
fn tied_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..4).prop_map(f64::from), n)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=8).prop_flat_map(|n| {
        prop_oneof![
            (tied_vec(n), tied_vec(n)),
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n)
            ),
        ]
    })
}

#[test]
fn spot_values() {
    assert!((srcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!((krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(mid_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
}

#[test]
fn perfect_and_reversed_agreement() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let r = [4.0, 3.0, 2.0, 1.0];
    assert_eq!(srcc(&x, &x).unwrap(), 1.0);
    assert_eq!(krcc(&x, &x).unwrap(), 1.0);
    assert_eq!(krcc(&x, &r).unwrap(), -1.0);
    assert!((lcc(&x, &r).unwrap() + 1.0).abs() < 1e-15);
}

#[test]
fn constant_input_is_undefined() {
    for f in [lcc, srcc, krcc] {
        let err = f(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, pkrank::Error::UndefinedCorrelation(_)), "{err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rank_correlations_match_brute_force((x, y) in pair()) {
        prop_assert_eq!(mid_ranks(&x), brute_ranks(&x));
        if is_constant(&x) || is_constant(&y) {
            prop_assert!(srcc(&x, &y).is_err());
            prop_assert!(krcc(&x, &y).is_err());
        } else {
            prop_assert!((srcc(&x, &y).unwrap() - brute_srcc(&x, &y)).abs() <= 1e-12);
            prop_assert!((krcc(&x, &y).unwrap() - brute_krcc(&x, &y)).abs() <= 1e-12);
            prop_assert!((lcc(&x, &y).unwrap() - brute_pearson(&x, &y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn correlations_are_symmetric_and_bounded((x, y) in pair()) {
        prop_assume!(!is_constant(&x) && !is_constant(&y));
        for f in [lcc, srcc, krcc] {
            let a = f(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - f(&y, &x).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_correlations_ignore_monotone_maps((x, y) in pair()) {
        prop_assume!(!is_constant(&x) && !is_constant(&y));
        let warped: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert!((srcc(&x, &y).unwrap() - srcc(&warped, &y).unwrap()).abs() <= 1e-12);
        prop_assert!((krcc(&x, &y).unwrap() - krcc(&warped, &y).unwrap()).abs() <= 1e-12);
    }
}
