//! Linear assignment: a shortest-augmenting-path Hungarian solver and
//! Murty's ranked enumeration of the k cheapest assignments.
//!
//! Costs are `f64`; `f64::INFINITY` marks a forbidden pair.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// One complete assignment: `rows[i]` is the column assigned to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub rows: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns `None` when no assignment avoids forbidden pairs.
pub fn solve(cost: &[Vec<f64>]) -> Option<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Some(Assignment {
            rows: Vec::new(),
            cost: 0.0,
        });
    }
    let m = cost[0].len();
    if m < n || cost.iter().any(|r| r.len() != m) {
        return None;
    }
    let max_finite = cost
        .iter()
        .flatten()
        .filter(|c| c.is_finite())
        .fold(0.0f64, |a, &c| a.max(c.abs()));
    // Any assignment using a forbidden pair costs more than every feasible one.
    let big = (max_finite + 1.0) * (2 * n + 1) as f64;
    let a = |i: usize, j: usize| {
        let c = cost[i - 1][j - 1];
        if c.is_finite() {
            c
        } else {
            big
        }
    };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut rows = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    let mut total = 0.0;
    for (i, &j) in rows.iter().enumerate() {
        let c = cost[i][j];
        if !c.is_finite() {
            return None;
        }
        total += c;
    }
    Some(Assignment { rows, cost: total })
}

struct Node {
    cost: Vec<Vec<f64>>,
    solution: Assignment,
    order: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // min-heap on cost, FIFO on ties
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .solution
            .cost
            .total_cmp(&self.solution.cost)
            .then_with(|| other.order.cmp(&self.order))
    }
}

/// The `k` cheapest distinct assignments in non-decreasing cost order.
pub fn k_best(cost: &[Vec<f64>], k: usize) -> Vec<Assignment> {
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    let Some(first) = solve(cost) else {
        return out;
    };
    let mut order = 0;
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        cost: cost.to_vec(),
        solution: first,
        order,
    });
    while let Some(node) = heap.pop() {
        let n = node.solution.rows.len();
        let mut constrained = node.cost.clone();
        for i in 0..n {
            let col = node.solution.rows[i];
            let mut child = constrained.clone();
            child[i][col] = f64::INFINITY;
            if let Some(sol) = solve(&child) {
                order += 1;
                heap.push(Node {
                    cost: child,
                    solution: sol,
                    order,
                });
            }
            // fix row i -> col for the remaining subproblems
            for (jj, c) in constrained[i].iter_mut().enumerate() {
                if jj != col {
                    *c = f64::INFINITY;
                }
            }
            for (ii, row) in constrained.iter_mut().enumerate() {
                if ii != i {
                    row[col] = f64::INFINITY;
                }
            }
        }
        out.push(node.solution);
        if out.len() >= k {
            break;
        }
    }
    out
}
