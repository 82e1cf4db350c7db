//! Optimal one-to-one assignment of ground-truth boxes to queries.

use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column of a row-major
/// `rows x cols` cost matrix with `rows <= cols`. Returns the column of each
/// row and the total cost.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != rows * cols {
        return Err(Error::shape("hungarian", format!("{} costs for {rows}x{cols}", cost.len())));
    }
    if rows > cols {
        return Err(Error::Contract(format!("cannot assign {rows} rows to {cols} columns")));
    }
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Contract(format!("non-finite assignment cost {c}")));
    }
    if rows == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel, rows and columns are 1-based.
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum();
    Ok((assign, total))
}

/// Result of matching one head against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Ground-truth index matched to each query, if any.
    pub query_to_gt: Vec<Option<usize>>,
    pub cost: f64,
}

impl MatchResult {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query_to_gt.iter().enumerate().filter_map(|(q, g)| g.map(|g| (q, g)))
    }

    pub fn num_matched(&self) -> usize {
        self.query_to_gt.iter().flatten().count()
    }
}

/// Matches `gts` ground truths to `queries` queries given a row-major
/// `[gts, queries]` cost matrix.
pub fn match_queries(cost: &[f64], gts: usize, queries: usize) -> Result<MatchResult> {
    let (assign, total) = hungarian(cost, gts, queries)?;
    let mut query_to_gt = vec![None; queries];
    for (g, q) in assign.into_iter().enumerate() {
        query_to_gt[q] = Some(g);
    }
    Ok(MatchResult { query_to_gt, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], rows: usize, cols: usize, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i * cols + j] + rec(cost, rows, cols, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, rows, cols, 0, &mut vec![false; cols])
    }

    #[test]
    fn two_by_two() {
        let (a, c) = hungarian(&[1.0, 2.0, 3.0, 0.0], 2, 2).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(c, 1.0);
    }

    #[test]
    fn empty_and_invalid() {
        assert_eq!(hungarian(&[], 0, 5).unwrap(), (vec![], 0.0));
        assert!(hungarian(&[0.0; 6], 3, 2).is_err());
        assert!(hungarian(&[f64::NAN, 0.0], 1, 2).is_err());
    }

    #[test]
    fn match_result_pairs() {
        let m = match_queries(&[5.0, 1.0, 9.0], 1, 3).unwrap();
        assert_eq!(m.query_to_gt, vec![None, Some(0), None]);
        assert_eq!(m.pairs().collect::<Vec<_>>(), vec![(1, 0)]);
    }

    proptest! {
        #[test]
        fn optimal_against_exhaustive(
            (rows, cols, cost) in (1usize..=6).prop_flat_map(|r| (Just(r), r..=7))
                .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-10.0f64..10.0, r * c)))
        ) {
            let (assign, total) = hungarian(&cost, rows, cols).unwrap();
            let mut seen = assign.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), rows);
            prop_assert!((total - brute_force(&cost, rows, cols)).abs() < 1e-9);
        }

        #[test]
        fn integer_costs_with_ties(cost in prop::collection::vec(0u8..3, 16)) {
            let cost: Vec<f64> = cost.into_iter().map(f64::from).collect();
            let (_, total) = hungarian(&cost, 4, 4).unwrap();
            prop_assert_eq!(total, brute_force(&cost, 4, 4));
        }
    }
}
