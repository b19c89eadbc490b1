//! Optimal-transport depth loss.
//!
//! Depth maps are turned into histograms over depth-value bins
//! ([`normalize`]); the ground cost between bins is the squared distance of
//! their centers ([`CostMatrix`]). Three solvers compute the transport cost:
//!
//! * [`exact_1d`]: monotone (quantile) coupling, exact for convex costs on
//!   the line;
//! * [`lp`]: transportation simplex, exact for any cost, small problems
//!   only;
//! * [`sinkhorn`]: entropic relaxation in the log domain, which also yields
//!   dual potentials for gradients.

mod exact;
mod loss;
mod lp;
mod sinkhorn;

pub use exact::exact_1d;
pub use loss::{
    combined_loss, combined_on, mse, mse_on, otdl, otdl_gradient, otdl_smooth, otdl_solution,
    OtSolver, OtdlConfig, OtdlTerm,
};
pub use lp::{lp, transport_lp, LpSolution, LP_MAX_BINS};
pub use sinkhorn::{sinkhorn, Epsilon, SinkhornConfig, SinkhornSolution, MASS_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform bins over `[d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinGrid {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl Default for BinGrid {
    /// 64 bins over an indoor range of 1 mm to 10 m.
    fn default() -> Self {
        BinGrid {
            d_min: 1e-3,
            d_max: 10.0,
            bins: 64,
        }
    }
}

impl BinGrid {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self> {
        let g = BinGrid { d_min, d_max, bins };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.d_min < self.d_max) {
            return Err(Error::invalid(format!(
                "depth range [{}, {}] is empty",
                self.d_min, self.d_max
            )));
        }
        if self.bins < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.bins as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.bins)
            .map(|i| self.d_min + (i as f64 + 0.5) * w)
            .collect()
    }

    /// Bin holding `v` after clamping into range. Bins are half-open except
    /// the last, which also holds `d_max`.
    pub fn index_of(&self, v: f64) -> usize {
        let v = v.clamp(self.d_min, self.d_max);
        (((v - self.d_min) / self.width()).floor() as usize).min(self.bins - 1)
    }
}

/// Unit-mass histogram over increasing, uniformly spaced bin centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution {
    bins: Vec<f64>,
    mass: Vec<f64>,
}

impl DepthDistribution {
    pub fn new(bins: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        check_centers(&bins)?;
        if mass.len() != bins.len() {
            return Err(Error::shape(
                "distribution",
                format!("{} bins but {} masses", bins.len(), mass.len()),
            ));
        }
        if let Some(m) = mass.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid(format!(
                "mass {m} is negative or not finite"
            )));
        }
        let total = crate::tensor::pairwise_sum(&mass);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("masses sum to {total}, not 1")));
        }
        Ok(DepthDistribution { bins, mass })
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn from_weights(bins: Vec<f64>, weights: &[f64]) -> Result<Self> {
        let total = crate::tensor::pairwise_sum(weights);
        if !(total > 0.0) {
            return Err(Error::invalid("weights must have positive total"));
        }
        Self::new(bins, weights.iter().map(|w| w / total).collect())
    }

    /// All mass in bin `index`.
    pub fn point(bins: Vec<f64>, index: usize) -> Result<Self> {
        let mut mass = vec![0.0; bins.len()];
        *mass
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("bin {index} out of range")))? = 1.0;
        Self::new(bins, mass)
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub(crate) fn same_grid(&self, other: &DepthDistribution) -> Result<()> {
        let scale = self
            .bins
            .iter()
            .chain(&other.bins)
            .fold(1.0f64, |m, b| m.max(b.abs()));
        if self.bins.len() != other.bins.len()
            || self
                .bins
                .iter()
                .zip(&other.bins)
                .any(|(a, b)| (a - b).abs() > 1e-12 * scale)
        {
            return Err(Error::invalid(
                "distributions are defined on different bin grids",
            ));
        }
        Ok(())
    }
}

fn check_centers(bins: &[f64]) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::invalid("no bins"));
    }
    if bins.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("bin centers must be strictly increasing"));
    }
    if bins.len() > 2 {
        let span = bins[bins.len() - 1] - bins[0];
        let step = span / (bins.len() - 1) as f64;
        if bins
            .windows(2)
            .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * span)
        {
            return Err(Error::invalid("bin centers must be uniformly spaced"));
        }
    }
    Ok(())
}

/// Squared-distance ground cost between bin centers.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_centers(bins: &[f64]) -> Result<Self> {
        if bins.is_empty() || bins.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "bin centers must be non-empty and strictly increasing",
            ));
        }
        let n = bins.len();
        let entries = (0..n * n)
            .map(|k| {
                let d = bins[k / n] - bins[k % n];
                d * d
            })
            .collect();
        Ok(CostMatrix { n, entries })
    }

    /// Arbitrary nonnegative `n x n` costs (row-major).
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::shape(
                "cost_matrix",
                format!("need {} entries, got {}", n * n, entries.len()),
            ));
        }
        if entries.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("costs must be finite and nonnegative"));
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }
}

/// Coupling of two distributions over the same bins.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    n: usize,
    flow: Vec<f64>,
}

impl TransportPlan {
    pub(crate) fn new(n: usize, flow: Vec<f64>) -> Self {
        debug_assert_eq!(flow.len(), n * n);
        TransportPlan { n, flow }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.flow[i * self.n + j]
    }

    pub fn flow(&self) -> &[f64] {
        &self.flow
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.flow.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.flow[i * self.n + j]).sum())
            .collect()
    }

    /// Larger of the L1 row and column marginal errors.
    pub fn marginal_violation(&self, p: &[f64], q: &[f64]) -> f64 {
        let rows: f64 = self
            .row_sums()
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b).abs())
            .sum();
        let cols: f64 = self
            .col_sums()
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b).abs())
            .sum();
        rows.max(cols)
    }

    pub fn cost(&self, m: &CostMatrix) -> f64 {
        crate::tensor::pairwise_sum(
            &self
                .flow
                .iter()
                .zip(m.entries())
                .map(|(t, c)| t * c)
                .collect::<Vec<_>>(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.flow.clone()).expect("square plan")
    }
}

/// Transport cost with the plan that achieves it.
#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    pub cost: f64,
    pub plan: TransportPlan,
}

/// Triangular soft-assignment weights of one depth value: `(bin, weight,
/// d weight / d value)` for every bin with nonzero weight. Weights sum to 1.
pub(crate) fn soft_weights(
    v: f64,
    grid: &BinGrid,
    centers: &[f64],
    softness: f64,
) -> Vec<(usize, f64, f64)> {
    let inside = v > grid.d_min && v < grid.d_max;
    let v = v.clamp(grid.d_min, grid.d_max);
    let half = softness * grid.width();
    let lo = ((v - half - centers[0]) / grid.width()).floor().max(0.0) as usize;
    let hi =
        (((v + half - centers[0]) / grid.width()).ceil().max(0.0) as usize).min(centers.len() - 1);
    let mut taps = Vec::new();
    let (mut total, mut dtotal) = (0.0, 0.0);
    for (b, &c) in centers.iter().enumerate().take(hi + 1).skip(lo) {
        let r = (v - c) / half;
        if r.abs() < 1.0 {
            let k = 1.0 - r.abs();
            let dk = if inside { -r.signum() / half } else { 0.0 };
            total += k;
            dtotal += dk;
            taps.push((b, k, dk));
        }
    }
    if total <= 0.0 {
        // kernel narrower than the gap to the nearest center
        return vec![(grid.index_of(v), 1.0, 0.0)];
    }
    taps.into_iter()
        .map(|(b, k, dk)| (b, k / total, (dk * total - k * dtotal) / (total * total)))
        .collect()
}

/// Histogram of a depth map over `grid`.
///
/// `softness = 0` counts each (clamped) value in its bin. `softness > 0`
/// spreads each value over nearby centers with a triangular kernel of
/// half-width `softness x bin width`, normalized per value.
pub fn normalize(depth: &Tensor, grid: &BinGrid, softness: f64) -> Result<DepthDistribution> {
    grid.validate()?;
    if depth.is_empty() {
        return Err(Error::invalid("empty depth map"));
    }
    if !(softness >= 0.0 && softness.is_finite()) {
        return Err(Error::invalid(format!(
            "softness must be >= 0, got {softness}"
        )));
    }
    let centers = grid.centers();
    let mut mass = vec![0.0; grid.bins];
    if softness == 0.0 {
        for &v in depth.data() {
            mass[grid.index_of(v)] += 1.0;
        }
    } else {
        for &v in depth.data() {
            for (b, w, _) in soft_weights(v, grid, &centers, softness) {
                mass[b] += w;
            }
        }
    }
    let n = depth.len() as f64;
    for m in &mut mass {
        *m /= n;
    }
    let total = crate::tensor::pairwise_sum(&mass);
    if (total - 1.0).abs() > 1e-12 {
        for m in &mut mass {
            *m /= total;
        }
    }
    DepthDistribution::new(centers, mass)
}
