//! Minimum-cost one-to-one assignment (Kuhn-Munkres) over rectangular cost
//! matrices, plus IoU gating of the resulting pairs.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("non-finite cost {value} at ({row}, {col})")]
    InvalidCost { row: usize, col: usize, value: f64 },
}

/// Matched pairs plus the rows and columns left over. All index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Sum of `cost[(r, c)]` over the pairs, accumulated in row order.
    pub fn total_cost(&self, cost: &DMatrix<f64>) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
    }
}

/// Solves the rectangular assignment problem, returning `min(rows, cols)` pairs
/// of minimum total cost.
///
/// Rows are inserted in index order and ties in the reduced costs resolve to
/// the lowest column index, so the result is reproducible bit-for-bit.
pub fn solve(cost: &DMatrix<f64>) -> Result<Assignment, AssignmentError> {
    let (rows, cols) = cost.shape();
    for r in 0..rows {
        for c in 0..cols {
            let value = cost[(r, c)];
            if !value.is_finite() {
                return Err(AssignmentError::InvalidCost { row: r, col: c, value });
            }
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::from_pairs(Vec::new(), rows, cols));
    }
    let pairs = if rows <= cols {
        kuhn_munkres(rows, cols, |i, j| cost[(i, j)])
    } else {
        kuhn_munkres(cols, rows, |i, j| cost[(j, i)])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    Ok(Assignment::from_pairs(pairs, rows, cols))
}

/// Shortest augmenting path with row/column potentials. Requires `n <= m`.
fn kuhn_munkres(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut col_owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| col_owner[j] != 0)
        .map(|j| (col_owner[j] - 1, j - 1))
        .collect()
}

/// Drops pairs whose IoU is below `tau`, moving their endpoints to the
/// unmatched sets.
pub fn gate(a: &Assignment, iou: &DMatrix<f64>, tau: f64) -> Assignment {
    let (kept, dropped): (Vec<_>, Vec<_>) = a.pairs.iter().partition(|&&(r, c)| iou[(r, c)] >= tau);
    let mut unmatched_rows = a.unmatched_rows.clone();
    let mut unmatched_cols = a.unmatched_cols.clone();
    for (r, c) in dropped {
        unmatched_rows.push(r);
        unmatched_cols.push(c);
    }
    unmatched_rows.sort_unstable();
    unmatched_cols.sort_unstable();
    Assignment {
        pairs: kept,
        unmatched_rows,
        unmatched_cols,
    }
}

/// Maximum-IoU one-to-one matching restricted to pairs with IoU >= `tau`.
///
/// Entries below the gate are zeroed before solving on `1 - IoU`, so the
/// solver never trades a valid pair for one that the gate later removes.
/// The surviving total IoU is the maximum over all gated matchings.
pub fn match_iou(iou: &DMatrix<f64>, tau: f64) -> Assignment {
    let cost = iou.map(|v| if v >= tau && v.is_finite() { 1.0 - v } else { 1.0 });
    // Entries are finite by construction.
    let solved = solve(&cost).unwrap_or_default();
    gate(&solved, iou, tau)
}
