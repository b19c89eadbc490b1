//! Exact transport by the transportation simplex (MODI method).
//!
//! The basis is a spanning tree of the bipartite row/column graph with
//! `2n - 1` cells, degenerate cells included. Entering and leaving cells are
//! chosen by Bland's smallest-index rule, which rules out cycling on
//! degenerate pivots.

use std::collections::VecDeque;

use super::{CostMatrix, DepthDistribution, OtSolution, TransportPlan};
use crate::error::{Error, Result};

/// Largest problem the exact solver accepts.
pub const LP_MAX_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub cost: f64,
    pub plan: TransportPlan,
    /// Potentials with `u_i + v_j <= c_ij` everywhere and equality on the
    /// basis; an optimality certificate.
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
    pub pivots: usize,
}

/// Exact OT between two distributions on the same grid.
pub fn lp(p: &DepthDistribution, q: &DepthDistribution, m: &CostMatrix) -> Result<OtSolution> {
    p.same_grid(q)?;
    let s = transport_lp(p.mass(), q.mass(), m)?;
    Ok(OtSolution {
        cost: s.cost,
        plan: s.plan,
    })
}

/// Minimizes `Σ T_ij c_ij` over nonnegative `T` with row sums `a` and
/// column sums `b` (both of equal total).
pub fn transport_lp(a: &[f64], b: &[f64], m: &CostMatrix) -> Result<LpSolution> {
    let n = m.len();
    if n > LP_MAX_BINS {
        return Err(Error::Solver(format!(
            "exact LP is limited to {LP_MAX_BINS} bins, got {n}; use the Sinkhorn solver for larger grids"
        )));
    }
    if a.len() != n || b.len() != n {
        return Err(Error::shape(
            "ot_lp",
            format!(
                "{n}x{n} costs with marginals of length {} and {}",
                a.len(),
                b.len()
            ),
        ));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("marginals must be nonnegative"));
    }
    let c = m.entries();
    let tol = 1e-12 * m.max().max(1.0);

    let mut x = vec![0.0; n * n];
    let mut basic = vec![false; n * n];
    let mut basis: Vec<usize> = Vec::with_capacity(2 * n - 1);

    // north-west corner start: a staircase of exactly 2n - 1 cells
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    loop {
        let moved = ra.min(rb);
        x[i * n + j] = moved;
        basic[i * n + j] = true;
        basis.push(i * n + j);
        ra -= moved;
        rb -= moved;
        if i == n - 1 && j == n - 1 {
            break;
        }
        if i == n - 1 || (j < n - 1 && ra > 0.0 && rb == 0.0) {
            j += 1;
            rb = b[j];
        } else {
            i += 1;
            ra = a[i];
        }
    }

    let max_pivots = 50 * n * n + 100;
    let mut pivots = 0;
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    loop {
        let adj = adjacency(n, &basis);
        potentials(n, c, &adj, &mut u, &mut v);

        let entering = (0..n * n).find(|&k| !basic[k] && c[k] - u[k / n] - v[k % n] < -tol);
        let Some(enter) = entering else { break };
        if pivots == max_pivots {
            return Err(Error::Solver(format!(
                "transportation simplex exceeded {max_pivots} pivots"
            )));
        }
        pivots += 1;

        // cells on the tree path from column `je` back to row `ie`
        let (ie, je) = (enter / n, enter % n);
        let path = tree_path(n, &adj, n + je, ie);
        // path[0] touches column je and loses mass, then signs alternate
        let leave = path
            .iter()
            .step_by(2)
            .copied()
            .min_by(|&p, &q| x[p].total_cmp(&x[q]).then(p.cmp(&q)))
            .expect("cycle has a minus cell");
        let theta = x[leave];
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                x[cell] -= theta;
            } else {
                x[cell] += theta;
            }
        }
        x[leave] = 0.0;
        x[enter] = theta;
        basic[leave] = false;
        basic[enter] = true;
        let slot = basis
            .iter()
            .position(|&k| k == leave)
            .expect("leaving cell is basic");
        basis[slot] = enter;
    }

    for f in &mut x {
        // cancellation residue from pivot updates
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    let plan = TransportPlan::new(n, x);
    Ok(LpSolution {
        cost: plan.cost(m),
        plan,
        row_duals: u,
        col_duals: v,
        pivots,
    })
}

/// Tree adjacency over nodes `0..n` (rows) and `n..2n` (columns); each
/// entry is `(neighbour, cell)`.
fn adjacency(n: usize, basis: &[usize]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); 2 * n];
    for &cell in basis {
        let (i, j) = (cell / n, cell % n);
        adj[i].push((n + j, cell));
        adj[n + j].push((i, cell));
    }
    adj
}

/// Solves `u_i + v_j = c_ij` on the basis with `u_0 = 0`.
fn potentials(n: usize, c: &[f64], adj: &[Vec<(usize, usize)>], u: &mut [f64], v: &mut [f64]) {
    let mut seen = vec![false; 2 * n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = queue.pop_front() {
        for &(next, cell) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            if next >= n {
                v[next - n] = c[cell] - u[node];
            } else {
                u[next] = c[cell] - v[node - n];
            }
            queue.push_back(next);
        }
    }
    debug_assert!(
        seen.iter().all(|&s| s),
        "basis must span all rows and columns"
    );
}

/// Cells along the unique tree path from `from` to `to`, in order.
fn tree_path(n: usize, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; 2 * n];
    let mut seen = vec![false; 2 * n];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, cell) = parent[node].expect("tree is connected");
        cells.push(cell);
        node = prev;
    }
    cells.reverse();
    cells
}
