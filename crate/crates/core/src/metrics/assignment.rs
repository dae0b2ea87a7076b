//! Minimum-cost perfect matching between two equal-size point sets.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point3};

/// A bijection `i -> perm[i]` between two clouds of equal size, with its
/// total cost `sum_i |a_i - b_perm(i)|`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Matching {
    pub fn from_perm(a: &[Point3], b: &[Point3], perm: Vec<usize>) -> Self {
        let cost = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| dist2(&a[i], &b[j]).sqrt())
            .sum();
        Matching { perm, cost }
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        self.perm.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// Exact assignment by the Hungarian method (shortest augmenting paths with
/// potentials), `O(n^3)`. `cost(i, j)` is read row by row.
pub fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) matched to column j; way[j]: previous column on the path
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Settings for the epsilon-scaling auction solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuctionConfig {
    /// Target relative gap: stop once the cost is provably within
    /// `(1 + delta)` of the optimum.
    pub delta: f64,
    /// Divisor applied to epsilon between scaling phases.
    pub eps_factor: f64,
    /// Upper bound on the total number of bids.
    pub max_rounds: usize,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        AuctionConfig {
            delta: 0.01,
            eps_factor: 4.0,
            max_rounds: 200_000_000,
        }
    }
}

/// Forward auction with epsilon scaling for the Euclidean assignment
/// between `a` and `b`. An epsilon-complementary-slack assignment costs at
/// most `n * eps` more than the optimum, which gives the stopping rule.
pub fn auction(a: &[Point3], b: &[Point3], cfg: &AuctionConfig) -> Result<Vec<usize>> {
    let n = a.len();
    assert_eq!(n, b.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| dist2(&a[i], &b[j]).sqrt();
    let mut max_cost: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            max_cost = max_cost.max(cost(i, j));
        }
    }
    if max_cost == 0.0 {
        return Ok((0..n).collect());
    }
    let eps_min = max_cost * 1e-12;
    let mut eps = max_cost / 4.0;
    let mut prices = vec![0.0; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut bids = 0usize;
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|a| *a = None);
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            bids += 1;
            if bids > cfg.max_rounds {
                return Err(Error::NonConvergence {
                    solver: "auction",
                    rounds: cfg.max_rounds,
                });
            }
            let (mut best_j, mut best, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, price) in prices.iter().enumerate() {
                let value = -cost(i, j) - price;
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let increment = if second.is_finite() { best - second + eps } else { eps };
            prices[best_j] += increment;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            assigned[i] = Some(best_j);
        }
        let total: f64 = (0..n).map(|i| cost(i, assigned[i].unwrap())).sum();
        let gap = n as f64 * eps;
        if gap * (1.0 + cfg.delta) <= cfg.delta * total || eps <= eps_min {
            break;
        }
        eps = (eps / cfg.eps_factor).max(eps_min);
    }
    Ok(assigned.into_iter().map(|j| j.unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_small_matrix() {
        let c = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let perm = hungarian(3, |i, j| c[i][j]);
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn auction_single_point() {
        let perm = auction(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], &AuctionConfig::default()).unwrap();
        assert_eq!(perm, vec![0]);
    }

    #[test]
    fn auction_reports_non_convergence() {
        let a: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let b: Vec<Point3> = (0..10).map(|i| [i as f64 + 0.5, 1.0, 0.0]).collect();
        let cfg = AuctionConfig {
            max_rounds: 3,
            ..AuctionConfig::default()
        };
        assert!(matches!(auction(&a, &b, &cfg), Err(Error::NonConvergence { .. })));
    }
}
