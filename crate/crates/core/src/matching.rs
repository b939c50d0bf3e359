//! Minimal-cost square assignment.

use crate::error::{ConnaError, Result};

/// Square matrix of non-negative finite costs, `costs[j][k]` = cost of
/// giving target `k` to slot `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(ConnaError::Shape(format!(
                "cost matrix must be square, got {n} rows of lengths {:?}",
                rows.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Self::from_flat(n, rows.into_iter().flatten().collect())
    }

    pub fn from_flat(n: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != n * n {
            return Err(ConnaError::Shape(format!(
                "{} costs for a {n}×{n} matrix",
                costs.len()
            )));
        }
        if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
            return Err(ConnaError::NumericDomain(format!("non-finite cost {c}")));
        }
        Ok(Self { n, costs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.costs[j * self.n + k]
    }

    /// Cost of an explicit slot → target permutation.
    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(j, &k)| self.get(j, k)).sum()
    }
}

/// `perm[j]` is the target index matched to slot `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Shortest augmenting path Hungarian method, `O(n³)`.
pub fn hungarian_min_assignment(c: &CostMatrix) -> Assignment {
    let n = c.n;
    if n == 0 {
        return Assignment {
            perm: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = c.get(r - 1, col - 1) - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = next;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for col in 1..=n {
        perm[owner[col] - 1] = col - 1;
    }
    let total_cost = c.cost_of(&perm);
    Assignment { perm, total_cost }
}

/// Exhaustive search over all `n!` permutations; `n ≤ 8`.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment> {
    const MAX: usize = 8;
    if c.n > MAX {
        return Err(ConnaError::Size(format!(
            "brute force supports n ≤ {MAX}, got {}",
            c.n
        )));
    }
    let mut perm: Vec<usize> = (0..c.n).collect();
    let mut best = Assignment {
        perm: perm.clone(),
        total_cost: c.cost_of(&perm),
    };
    // Heap's algorithm
    let mut counters = vec![0usize; c.n];
    let mut i = 1;
    while i < c.n {
        if counters[i] < i {
            let swap = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(swap, i);
            let cost = c.cost_of(&perm);
            if cost < best.total_cost {
                best = Assignment {
                    perm: perm.clone(),
                    total_cost: cost,
                };
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}
