//! Minimum-cost perfect matching on square cost matrices.

/// Largest size solved by exhaustive enumeration.
pub const ENUMERATION_LIMIT: usize = 8;

const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `rows_to_cols[i]` is the column matched to row `i`.
    pub rows_to_cols: Vec<usize>,
    pub cost: f64,
    /// Another assignment attains the same cost (enumeration only).
    pub ambiguous: bool,
}

/// Optimal assignment: enumeration up to [`ENUMERATION_LIMIT`], Hungarian
/// algorithm above it.
pub fn solve(cost: &[Vec<f64>]) -> Assignment {
    if cost.len() <= ENUMERATION_LIMIT {
        brute_force(cost)
    } else {
        hungarian(cost)
    }
}

/// Scans all permutations in lexicographic order and keeps the first
/// minimum, so ties resolve to the lowest-index assignment.
pub fn brute_force(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_cost = total(&perm);
    let mut ambiguous = false;
    while next_permutation(&mut perm) {
        let c = total(&perm);
        if c < best_cost - TIE_TOL {
            best_cost = c;
            best.copy_from_slice(&perm);
            ambiguous = false;
        } else if (c - best_cost).abs() <= TIE_TOL {
            ambiguous = true;
        }
    }
    Assignment { rows_to_cols: best, cost: best_cost, ambiguous }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// O(n^3) Hungarian algorithm with row/column potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut rows_to_cols = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            rows_to_cols[owner[j] - 1] = j - 1;
        }
    }
    let cost_total = rows_to_cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Assignment { rows_to_cols, cost: cost_total, ambiguous: false }
}
