use crate::error::{CsdnError, Result};

/// One-to-one assignment of ground truths to predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(prediction, ground truth)`, ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Ground-truth index per prediction.
    pub fn target_of(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; num_preds];
        for &(p, g) in &self.pairs {
            t[p] = Some(g);
        }
        t
    }

    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Minimum-cost assignment of every column (ground truth) of the `N x M`
/// cost matrix to a distinct row (prediction).
///
/// Among all optimal assignments the one whose prediction sequence
/// `(pi(0), pi(1), ..)` over ground truths is lexicographically smallest is
/// returned, so ties never depend on solver internals.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(CsdnError::InvalidArgument("ragged cost matrix".into()));
    }
    if n < m {
        return Err(CsdnError::Infeasible { rows: n, cols: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(CsdnError::NonFinite("assignment cost".into()));
    }
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
        });
    }

    // Square problem: rows are ground truths padded with zero-cost dummies,
    // columns are predictions.
    let c = |r: usize, col: usize| if r < m { cost[col][r] } else { 0.0 };
    let (u, v, mut row_of_col) = solve_square(n, c);

    let scale = cost.iter().flatten().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight = |r: usize, col: usize| (c(r, col) - u[r] - v[col]).abs() <= tol;

    // Every optimal assignment is a perfect matching on the tight edges of
    // an optimal dual. Fix ground truths in order, each to the smallest
    // prediction that still admits a perfect matching of the rest.
    let mut col_of_row = vec![0; n];
    for (col, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = col;
    }
    let mut row_locked = vec![false; n];
    let mut col_locked = vec![false; n];
    for g in 0..m {
        for p in 0..n {
            if col_locked[p] || !tight(g, p) {
                continue;
            }
            if col_of_row[g] == p {
                row_locked[g] = true;
                col_locked[p] = true;
                break;
            }
            // Rematch: g takes p; p's old row and g's old column must be
            // re-paired through an alternating path.
            let (old_row, old_col) = (row_of_col[p], col_of_row[g]);
            let mut trial_row_of_col = row_of_col.clone();
            let mut trial_col_of_row = col_of_row.clone();
            trial_row_of_col[p] = g;
            trial_col_of_row[g] = p;
            row_locked[g] = true;
            col_locked[p] = true;
            let mut seen = vec![false; n];
            let ok = augment(
                old_row,
                old_col,
                &tight,
                &row_locked,
                &col_locked,
                &mut trial_row_of_col,
                &mut trial_col_of_row,
                &mut seen,
            );
            if ok {
                row_of_col = trial_row_of_col;
                col_of_row = trial_col_of_row;
                break;
            }
            row_locked[g] = false;
            col_locked[p] = false;
        }
        debug_assert!(row_locked[g], "optimal matching must stay reachable");
    }

    let pairs: Vec<(usize, usize)> = (0..m).map(|g| (col_of_row[g], g)).collect();
    let mut matched = vec![false; n];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched: (0..n).filter(|&p| !matched[p]).collect(),
    })
}

/// Finds an alternating path of tight edges that re-matches `row` while
/// freeing nothing but `target_col`; `row` is currently unmatched and
/// `target_col` is the only free column.
#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    target_col: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_locked: &[bool],
    col_locked: &[bool],
    row_of_col: &mut [usize],
    col_of_row: &mut [usize],
    seen: &mut [bool],
) -> bool {
    let n = col_of_row.len();
    for col in 0..n {
        if col_locked[col] || seen[col] || !tight(row, col) {
            continue;
        }
        seen[col] = true;
        if col == target_col {
            row_of_col[col] = row;
            col_of_row[row] = col;
            return true;
        }
        let next = row_of_col[col];
        if row_locked[next] {
            continue;
        }
        if augment(
            next, target_col, tight, row_locked, col_locked, row_of_col, col_of_row, seen,
        ) {
            row_of_col[col] = row;
            col_of_row[row] = col;
            return true;
        }
    }
    false
}

/// Shortest-augmenting-path Hungarian method on an `n x n` matrix. Returns
/// row potentials, column potentials (reduced costs `c - u - v >= 0`, zero
/// on the matching) and the row matched to each column.
fn solve_square(n: usize, c: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with index 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}
