use crate::{Error, Result};

/// Dense `gts × queries` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    gts: usize,
    queries: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(gts: usize, queries: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != gts * queries {
            return Err(Error::Matching(format!(
                "{gts}×{queries} matrix needs {} entries, got {}",
                gts * queries,
                data.len()
            )));
        }
        Ok(Self { gts, queries, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], queries: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != queries) {
            return Err(Error::Matching("ragged cost rows".into()));
        }
        Self::new(rows.len(), queries, rows.concat())
    }

    pub fn gts(&self) -> usize {
        self.gts
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn get(&self, g: usize, q: usize) -> f64 {
        self.data[g * self.queries + q]
    }

    /// Cost of assigning gt `g` to `assignment[g]`, summed in gt order.
    pub fn assignment_cost(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(g, &q)| self.get(g, q)).sum()
    }
}

/// Partial assignment of ground truths to queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(gt index, query index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    pub fn gt_for_query(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == q).map(|p| p.0)
    }
}

/// Minimum-cost assignment of every gt to a distinct query (`G ≤ N`).
///
/// Among optimal assignments the lexicographically smallest query sequence
/// (in gt order) is returned. `total_cost` is summed in gt order.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (g, n) = (cost.gts, cost.queries);
    if g > n {
        return Err(Error::Matching(format!("{g} ground truths exceed {n} queries")));
    }
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Matching(format!("non-finite cost {bad}")));
    }
    let rows: Vec<usize> = (0..g).collect();
    let cols: Vec<usize> = (0..n).collect();
    let mut current = solve(cost, &rows, &cols);
    let best = cost.assignment_cost(&current);

    // Walk gts in order, fixing each to the smallest query that still
    // admits an optimal completion.
    let mut used = vec![false; n];
    for gi in 0..g {
        for q in 0..n {
            if used[q] {
                continue;
            }
            if q == current[gi] {
                break;
            }
            let free: Vec<usize> = (0..n).filter(|&c| !used[c] && c != q).collect();
            let rest = solve(cost, &rows[gi + 1..], &free);
            let mut cand = current[..gi].to_vec();
            cand.push(q);
            cand.extend(rest);
            if cost.assignment_cost(&cand) <= best {
                current = cand;
                break;
            }
        }
        used[current[gi]] = true;
    }

    let pairs: Vec<(usize, usize)> = current.iter().copied().enumerate().collect();
    let unmatched_queries = (0..n).filter(|q| !used[*q]).collect();
    Ok(MatchResult {
        pairs,
        unmatched_queries,
        total_cost: cost.assignment_cost(&current),
    })
}

/// Shortest-augmenting-path assignment restricted to `rows × cols`
/// (`rows.len() ≤ cols.len()`). Returns the chosen column per row.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (r, c) = (rows.len(), cols.len());
    if r == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials; column 0 is a virtual root.
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut owner = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
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
            for j in 0..=c {
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
    let mut out = vec![0usize; r];
    for j in 1..=c {
        if owner[j] != 0 {
            out[owner[j] - 1] = cols[j - 1];
        }
    }
    out
}
