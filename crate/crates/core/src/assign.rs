//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use crate::error::{Error, Result};

/// Solves the rectangular assignment problem for a row-major `rows × cols`
/// cost matrix. Every row is assigned when `rows <= cols`, otherwise every
/// column is. Returns, per row, the assigned column.
pub fn hungarian(costs: &[f64], rows: usize, cols: usize) -> Result<Vec<Option<usize>>> {
    if costs.len() != rows * cols {
        return Err(Error::invalid("hungarian", format!("{} costs for a {rows}x{cols} matrix", costs.len())));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian"));
    }
    Ok(solve(costs, rows, cols))
}

fn solve(costs: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<f64> = (0..cols * rows).map(|i| costs[(i % rows) * cols + i / rows]).collect();
        let by_col = solve(&transposed, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }

    // 1-based arrays with a virtual column 0, after the classic e-maxx layout.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Total cost of an assignment produced by [`hungarian`].
pub fn assignment_cost(costs: &[f64], cols: usize, assignment: &[Option<usize>]) -> f64 {
    assignment.iter().enumerate().filter_map(|(r, c)| c.map(|c| costs[r * cols + c])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(costs: &[f64], rows: usize, cols: usize) -> f64 {
        fn go(costs: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(costs[r * cols + c] + go(costs, rows, cols, r + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        if rows <= cols {
            go(costs, rows, cols, 0, &mut vec![false; cols])
        } else {
            let t: Vec<f64> = (0..cols * rows).map(|i| costs[(i % rows) * cols + i / rows]).collect();
            go(&t, cols, rows, 0, &mut vec![false; rows])
        }
    }

    #[test]
    fn diagonal_optimum() {
        let a = hungarian(&[0.1, 0.9, 0.9, 0.1], 2, 2).unwrap();
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn more_rows_than_columns_leaves_one_unassigned() {
        let costs = [0.5, 0.2, 0.1, 0.9, 0.4, 0.3];
        let a = hungarian(&costs, 3, 2).unwrap();
        assert_eq!(a.iter().filter(|c| c.is_some()).count(), 2);
        assert!((assignment_cost(&costs, 2, &a) - brute_force(&costs, 3, 2)).abs() < 1e-12);
    }

    #[test]
    fn empty_problems() {
        assert!(hungarian(&[], 0, 3).unwrap().is_empty());
        assert_eq!(hungarian(&[], 2, 0).unwrap(), vec![None, None]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_enumeration(
            rows in 1usize..=6,
            cols in 1usize..=6,
            seed in proptest::collection::vec(0.0f64..10.0, 36),
        ) {
            let costs = &seed[..rows * cols];
            let a = hungarian(costs, rows, cols).unwrap();
            let mut seen = std::collections::HashSet::new();
            for c in a.iter().flatten() {
                prop_assert!(seen.insert(*c));
            }
            prop_assert_eq!(seen.len(), rows.min(cols));
            let got = assignment_cost(costs, cols, &a);
            prop_assert!((got - brute_force(costs, rows, cols)).abs() < 1e-9);
        }
    }
}
