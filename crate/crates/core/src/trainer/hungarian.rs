//! Minimum-cost assignment on rectangular matrices.
//!
//! Shortest augmenting path with dual potentials, O(n³) on the square
//! zero-padded matrix. Among optimal assignments the one chosen is
//! lexicographically smallest: row 0 takes the lowest column that still
//! admits an optimal completion, then row 1, and so on.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs in increasing row order.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for (i, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(CoreError::Invalid(format!(
                "cost matrix row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(CoreError::NonFiniteCost { row: i, col: j });
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment { pairs: Vec::new(), total_cost: 0.0 });
    }

    let n = rows.max(cols);
    let c = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    let (u, v) = potentials(n, &c);

    let scale = cost.iter().flatten().fold(1.0_f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| c(i, j) - u[i] - v[j] <= tol).collect())
        .collect();
    let row_to_col = lexicographic_perfect_matching(&tight);

    let pairs: Vec<(usize, usize)> = row_to_col
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols)
        .map(|(i, &j)| (i, j))
        .collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Optimal dual potentials `(u, v)` with `c(i,j) - u[i] - v[j] >= 0`.
fn potentials(n: usize, c: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    // 1-based arrays; column 0 is the virtual source.
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
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching of a bipartite graph that is
/// known to admit one.
fn lexicographic_perfect_matching(adj: &[Vec<bool>]) -> Vec<usize> {
    let n = adj.len();
    let mut fixed = vec![usize::MAX; n];
    let mut col_taken = vec![false; n];
    for i in 0..n {
        let mut choice = None;
        for j in 0..n {
            if adj[i][j] && !col_taken[j] {
                col_taken[j] = true;
                let ok = completes(adj, i + 1, &col_taken);
                col_taken[j] = false;
                if ok {
                    choice = Some(j);
                    break;
                }
            }
        }
        let choice = choice.expect("optimal duals always leave a tight perfect matching");
        fixed[i] = choice;
        col_taken[choice] = true;
    }
    fixed
}

/// Whether rows `start..` can be perfectly matched to the free columns.
fn completes(adj: &[Vec<bool>], start: usize, taken: &[bool]) -> bool {
    let n = adj.len();
    let mut owner = vec![usize::MAX; n];
    fn augment(
        adj: &[Vec<bool>],
        i: usize,
        taken: &[bool],
        seen: &mut [bool],
        owner: &mut [usize],
    ) -> bool {
        for j in 0..adj.len() {
            if adj[i][j] && !taken[j] && !seen[j] {
                seen[j] = true;
                if owner[j] == usize::MAX || augment(adj, owner[j], taken, seen, owner) {
                    owner[j] = i;
                    return true;
                }
            }
        }
        false
    }
    (start..n).all(|i| {
        let mut seen = vec![false; n];
        augment(adj, i, taken, &mut seen, &mut owner)
    })
}

/// Exhaustive search over all injective row→column maps, for testing.
/// Returns the lexicographically first optimum of the zero-padded square
/// problem restricted to real cells.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Assignment {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Assignment { pairs: Vec::new(), total_cost: 0.0 };
    }
    let n = rows.max(cols);
    let c = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    // Lexicographic enumeration keeps the first optimum on ties.
    loop {
        let total: f64 = (0..n).map(|i| c(i, perm[i])).sum();
        let better = match &best {
            None => true,
            Some((b, _)) => total < *b - 1e-9 * (1.0 + b.abs()),
        };
        if better {
            best = Some((total, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let pairs: Vec<(usize, usize)> =
        (0..rows).filter(|&i| perm[i] < cols).map(|i| (i, perm[i])).collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Assignment { pairs, total_cost }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
