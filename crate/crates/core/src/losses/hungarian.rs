//! Minimum-cost bipartite assignment.
//!
//! Rectangular inputs are zero-padded to a square matrix and solved with the
//! O(n^3) shortest-augmenting-path Hungarian method with row/column
//! potentials. Among several optimal assignments the lexicographically
//! smallest one (rows ascending, each taking the smallest feasible column)
//! is returned, so results never depend on solver internals.

use ndarray::Array2;

use super::LossError;

struct Solution {
    total: f64,
    /// Column assigned to each row.
    row_to_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Solves a square problem given as a dense row-major slice.
fn solve_square(cost: &[f64], n: usize) -> Solution {
    if n == 0 {
        return Solution { total: 0.0, row_to_col: vec![], u: vec![], v: vec![] };
    }
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|r| cost[r * n + row_to_col[r]]).sum();
    Solution {
        total,
        row_to_col,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Optimal completion of `sq` given rows `< first_row` already fixed and
/// `used_cols` unavailable. Returns (cost, assignment of the free rows).
fn solve_rest(sq: &[f64], n: usize, first_row: usize, used_cols: &[bool]) -> (f64, Vec<usize>) {
    let cols: Vec<usize> = (0..n).filter(|&c| !used_cols[c]).collect();
    let rows: Vec<usize> = (first_row..n).collect();
    let k = rows.len();
    debug_assert_eq!(k, cols.len());
    let mut sub = Vec::with_capacity(k * k);
    for &r in &rows {
        for &c in &cols {
            sub.push(sq[r * n + c]);
        }
    }
    let sol = solve_square(&sub, k);
    (sol.total, sol.row_to_col.iter().map(|&c| cols[c]).collect())
}

/// Minimum-cost assignment of an `n x m` cost matrix. Returns
/// `min(n, m)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<(usize, usize)>, LossError> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if !cost.iter().all(|c| c.is_finite()) {
        return Err(LossError::NonFinite("assignment cost"));
    }
    let size = n.max(m);
    let mut sq = vec![0.0; size * size];
    for ((r, c), &x) in cost.indexed_iter() {
        sq[r * size + c] = x;
    }
    let best = solve_square(&sq, size);
    let scale = cost.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * scale * size as f64;

    // Lexicographic tie-break: walk the real rows in order and move each to
    // the smallest column that still admits an optimal completion. Only
    // tight edges under the optimal potentials can appear in an optimum.
    let mut assign = best.row_to_col.clone();
    let mut used = vec![false; size];
    let mut fixed_cost = 0.0;
    for r in 0..n {
        let current = assign[r];
        for c in 0..current {
            if used[c] || (c >= m && current >= m) {
                continue;
            }
            if (sq[r * size + c] - best.u[r] - best.v[c]).abs() > tol {
                continue;
            }
            used[c] = true;
            let (rest, cols) = solve_rest(&sq, size, r + 1, &used);
            used[c] = false;
            if fixed_cost + sq[r * size + c] + rest <= best.total + tol {
                assign[r] = c;
                assign[r + 1..].copy_from_slice(&cols);
                break;
            }
        }
        used[assign[r]] = true;
        fixed_cost += sq[r * size + assign[r]];
    }
    Ok((0..n)
        .filter(|&r| assign[r] < m)
        .map(|r| (r, assign[r]))
        .collect())
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[[r, c]]).sum()
}
