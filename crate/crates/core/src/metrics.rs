//! System-level agreement between accumulated scores and reference MOS.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::RankingResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub lcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(Self {
            lcc: lcc(x, y)?,
            srcc: srcc(x, y)?,
            krcc: krcc(x, y)?,
            n: x.len(),
        })
    }

    /// LCC + SRCC + KRCC, the checkpoint selection criterion.
    pub fn sum(&self) -> f64 {
        self.lcc + self.srcc + self.krcc
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Data(format!(
            "correlation inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two observations".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite correlation input".into()));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn lcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties receiving the average of the ranks they span.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of mid-ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    lcc(&mid_ranks(x), &mid_ranks(y))
}

/// Number of pairs tied within each run of equal values in sorted order.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (strict `a > b` swaps).
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid])
        + sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b with tie correction, via Knight's O(n log n) method.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let joint: Vec<(f64, f64)> = idx.iter().map(|&i| (x[i], y[i])).collect();
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let ties_x = tied_pairs(&xs);
    let ties_xy = tied_pairs(&joint);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let ties_y = tied_pairs(&ys);

    let denom_x = n0 - ties_x;
    let denom_y = n0 - ties_y;
    if denom_x == 0 || denom_y == 0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    // concordant - discordant
    let s = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok((s / ((denom_x as f64) * (denom_y as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Correlates a ranking's accumulated scores with per-system mean MOS,
/// matching entries by system id.
pub fn correlation_report(
    ranking: &RankingResult,
    mean_mos: &[(String, f64)],
) -> Result<CorrelationReport> {
    let table: HashMap<&str, f64> = mean_mos.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    if table.len() != mean_mos.len() {
        return Err(Error::Data("duplicate system id in MOS table".into()));
    }
    if table.len() != ranking.system_ids.len() {
        return Err(Error::Data(format!(
            "ranking has {} systems, MOS table has {}",
            ranking.system_ids.len(),
            table.len()
        )));
    }
    let mos: Vec<f64> = ranking
        .system_ids
        .iter()
        .map(|id| {
            table
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("no mean MOS for system {id}")))
        })
        .collect::<Result<_>>()?;
    CorrelationReport::compute(&ranking.scores, &mos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn lcc_spot_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(lcc(&x, &affine).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(lcc(&x, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert_relative_eq!(lcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn srcc_spot_values() {
        // 1 - 6 * (0 + 1 + 1) / (27 - 3) = 0.5
        assert_relative_eq!(srcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, epsilon = 1e-12);
        let x = [0.1, 0.5, 0.7, 2.0];
        let cubed: Vec<f64> = x.iter().map(|v: &f64| v.powi(3)).collect();
        assert_relative_eq!(srcc(&x, &cubed).unwrap(), 1.0, epsilon = 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_relative_eq!(srcc(&x, &rev).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn krcc_spot_values() {
        // 2 concordant, 1 discordant of 3 pairs
        assert_relative_eq!(krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(krcc(&[1.0, 2.0, 5.0], &[0.0, 0.1, 9.0]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        let x = [1.0, 2.0, 3.0];
        let c = [2.0, 2.0, 2.0];
        assert!(matches!(lcc(&x, &c), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(srcc(&c, &x), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(krcc(&x, &c), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(lcc(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(lcc(&[1.0, 2.0], &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn two_points_give_unit_magnitude() {
        let r = CorrelationReport::compute(&[1.0, 2.0], &[5.0, 3.0]).unwrap();
        assert_eq!((r.lcc, r.srcc, r.krcc), (-1.0, -1.0, -1.0));
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            pairs in prop::collection::vec((0i32..5, 0i32..5), 3..12)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
            for f in [lcc, srcc, krcc] {
                match (f(&x, &y), f(&y, &x)) {
                    (Ok(a), Ok(b)) => {
                        prop_assert!((a - b).abs() < 1e-12);
                        prop_assert!((-1.0..=1.0).contains(&a));
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "asymmetric definedness"),
                }
            }
        }

        #[test]
        fn monotone_transform_invariance(
            x in prop::collection::vec(-5.0f64..5.0, 4..10),
            y in prop::collection::vec(-5.0f64..5.0, 10),
        ) {
            let y = &y[..x.len()];
            let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let ax: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
            if let (Ok(a), Ok(b)) = (srcc(&x, y), srcc(&tx, y)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if let (Ok(a), Ok(b)) = (krcc(&x, y), krcc(&tx, y)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if let (Ok(a), Ok(b)) = (lcc(&x, y), lcc(&ax, y)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
