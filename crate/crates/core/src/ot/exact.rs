use super::{CostMatrix, DepthDistribution, OtSolution, TransportPlan};
use crate::error::Result;

/// Exact transport on a shared 1D grid via the monotone coupling.
///
/// For a cost that is a convex function of `b_i - b_j`, matching quantiles
/// in increasing order is optimal; the walk is the north-west corner rule
/// on the sorted bins.
pub fn exact_1d(p: &DepthDistribution, q: &DepthDistribution) -> Result<OtSolution> {
    p.same_grid(q)?;
    let n = p.len();
    let m = CostMatrix::from_centers(p.bins())?;
    let mut flow = vec![0.0; n * n];
    let (pm, qm) = (p.mass(), q.mass());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (pm[0], qm[0]);
    while i < n && j < n {
        let moved = ra.min(rb);
        flow[i * n + j] += moved;
        ra -= moved;
        rb -= moved;
        // the smaller remainder is now exactly zero; ties advance both
        if ra == 0.0 {
            i += 1;
            ra = pm.get(i).copied().unwrap_or(0.0);
        }
        if rb == 0.0 {
            j += 1;
            rb = qm.get(j).copied().unwrap_or(0.0);
        }
    }
    // The two totals can differ by a few ulps; whatever one side has left
    // goes to the last cell of its row (or column) so that side stays exact.
    if i < n {
        flow[i * n + n - 1] += ra;
        for r in i + 1..n {
            flow[r * n + n - 1] += pm[r];
        }
    } else if j < n {
        flow[(n - 1) * n + j] += rb;
        for c in j + 1..n {
            flow[(n - 1) * n + c] += qm[c];
        }
    }
    let plan = TransportPlan::new(n, flow);
    Ok(OtSolution {
        cost: plan.cost(&m),
        plan,
    })
}
