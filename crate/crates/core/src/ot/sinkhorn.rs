//! Entropic OT by log-domain Sinkhorn iteration.
//!
//! The plan is parameterized relative to the product coupling,
//! `T_ij = a_i b_j exp((f_i + g_j - M_ij) / eps)`, so that the potentials
//! `f, g` are the duals of the entropic problem and `f` is its gradient
//! with respect to `a` at convergence. Small `eps` is reached through a
//! geometric schedule of warm-started stages.

use nalgebra::{DMatrix, DVector};

use super::{CostMatrix, DepthDistribution, TransportPlan};
use crate::error::{Error, Result};

/// Additive floor on every bin mass before iterating.
pub const MASS_FLOOR: f64 = 1e-12;

/// Regularization strength, absolute or relative to `max(M)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Epsilon {
    Relative(f64),
    Absolute(f64),
}

impl Epsilon {
    pub fn resolve(&self, m: &CostMatrix) -> Result<f64> {
        let eps = match *self {
            Epsilon::Absolute(e) => e,
            // a single bin has max(M) = 0; fall back to unit scale
            Epsilon::Relative(r) => r * if m.max() > 0.0 { m.max() } else { 1.0 },
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {eps}"
            )));
        }
        Ok(eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iter: usize,
    /// Stopping threshold on the L1 marginal violation.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::Relative(1e-2),
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: Epsilon) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSolution {
    /// Transport cost `<T, M>`.
    pub cost: f64,
    /// Entropic objective at the returned potentials.
    pub entropic: f64,
    pub plan: TransportPlan,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
}

/// Entropic OT between two distributions on the same grid. Failing to reach
/// `tol` within `max_iter` is not an error; check `converged`.
pub fn sinkhorn(
    p: &DepthDistribution,
    q: &DepthDistribution,
    m: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    p.same_grid(q)?;
    sinkhorn_masses(p.mass(), q.mass(), m, cfg)
}

/// `(x + floor) / (1 + n floor)` for unit-mass `x`.
pub(crate) fn floored(x: &[f64]) -> Vec<f64> {
    let scale = 1.0 + x.len() as f64 * MASS_FLOOR;
    x.iter().map(|v| (v + MASS_FLOOR) / scale).collect()
}

pub(crate) fn sinkhorn_masses(
    a: &[f64],
    b: &[f64],
    m: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    let n = m.len();
    if a.len() != n || b.len() != n {
        return Err(Error::shape(
            "sinkhorn",
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
    let eps = cfg.epsilon.resolve(m)?;
    let (fa, fb) = (floored(a), floored(b));
    let c = m.entries();

    // Empty bins carry only floor mass and stall the iteration, so solve on
    // the supports and extend the potentials by c-transforms afterwards.
    let support = |x: &[f64]| -> Vec<usize> {
        let s: Vec<usize> = (0..n).filter(|&i| x[i] > 0.0).collect();
        if s.is_empty() {
            (0..n).collect()
        } else {
            s
        }
    };
    let (rows, cols) = (support(a), support(b));
    let sub = Problem {
        a: rows.iter().map(|&i| fa[i]).collect(),
        b: cols.iter().map(|&j| fb[j]).collect(),
        c: rows
            .iter()
            .flat_map(|&i| cols.iter().map(move |&j| c[i * n + j]))
            .collect(),
    };
    let (fs, gs, iterations) = sub.solve(m.max(), eps, cfg);

    let full = Problem {
        a: fa.clone(),
        b: fb.clone(),
        c: c.to_vec(),
    };
    let mut f = vec![f64::NAN; n];
    let mut g = vec![f64::NAN; n];
    for (k, &i) in rows.iter().enumerate() {
        f[i] = fs[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        g[j] = gs[k];
    }
    let la: Vec<f64> = fa.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = fb.iter().map(|v| v.ln()).collect();
    for j in (0..n).filter(|j| !cols.contains(j)) {
        let terms: Vec<f64> = rows
            .iter()
            .map(|&i| la[i] + (f[i] - c[i * n + j]) / eps)
            .collect();
        g[j] = -eps * log_sum_exp(&terms);
    }
    for i in (0..n).filter(|i| !rows.contains(i)) {
        let terms: Vec<f64> = (0..n)
            .map(|j| lb[j] + (g[j] - c[i * n + j]) / eps)
            .collect();
        f[i] = -eps * log_sum_exp(&terms);
    }

    let plan = TransportPlan::new(n, full.plan(&f, &g, eps));
    let violation = full.violation(&plan);
    let mass = crate::tensor::pairwise_sum(plan.flow());
    let entropic = dot(&f, &fa) + dot(&g, &fb) - eps * (mass - 1.0);
    Ok(SinkhornSolution {
        cost: plan.cost(m),
        entropic,
        plan,
        f,
        g,
        epsilon: eps,
        iterations,
        violation,
        converged: violation < cfg.tol,
    })
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Plain sweeps in the final stage before Newton steps take over.
const NEWTON_AFTER: usize = 50;

/// Rectangular entropic problem with positive marginals `a`, `b` and
/// row-major costs `c`.
struct Problem {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl Problem {
    fn solve(&self, max_cost: f64, eps: f64, cfg: &SinkhornConfig) -> (Vec<f64>, Vec<f64>, usize) {
        let la: Vec<f64> = self.a.iter().map(|v| v.ln()).collect();
        let lb: Vec<f64> = self.b.iter().map(|v| v.ln()).collect();
        let mut f = vec![0.0; self.a.len()];
        let mut g = vec![0.0; self.b.len()];
        let mut iterations = 0;

        let mut stage = max_cost.max(eps);
        while stage > eps && iterations < cfg.max_iter {
            // intermediate stages only need a rough warm start
            let warm_tol = 1e-4_f64.max(cfg.tol);
            for _ in 0..500 {
                if iterations == cfg.max_iter {
                    break;
                }
                self.sweep(&mut f, &mut g, &la, &lb, stage);
                iterations += 1;
                if self.row_violation(&f, &g, stage) < warm_tol {
                    break;
                }
            }
            stage *= 0.5;
        }

        // Plain sweeps stall when eps is small against the bin spacing, so
        // after a short run the final stage switches to Newton steps on the
        // dual, each followed by one sweep.
        // Half the tolerance is left for the floor mass of bins outside the
        // support, which the caller adds back.
        let target = 0.5 * cfg.tol;
        let mut since_newton = 0;
        while iterations < cfg.max_iter {
            if self.row_violation(&f, &g, eps) < target {
                break;
            }
            if since_newton >= NEWTON_AFTER {
                self.newton_step(&mut f, &mut g, eps);
            } else {
                since_newton += 1;
            }
            self.sweep(&mut f, &mut g, &la, &lb, eps);
            iterations += 1;
        }
        (f, g, iterations)
    }

    fn plan(&self, f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let nb = self.b.len();
        let mut t = vec![0.0; self.a.len() * nb];
        for (i, (ai, fi)) in self.a.iter().zip(f).enumerate() {
            for (j, (bj, gj)) in self.b.iter().zip(g).enumerate() {
                t[i * nb + j] = ai * bj * ((fi + gj - self.c[i * nb + j]) / eps).exp();
            }
        }
        t
    }

    fn violation(&self, plan: &TransportPlan) -> f64 {
        plan.marginal_violation(&self.a, &self.b)
    }

    /// Marginal residuals `a - T 1` then `b - T^T 1`, and their L1 norm.
    fn residual(&self, t: &[f64]) -> (Vec<f64>, f64) {
        let (na, nb) = (self.a.len(), self.b.len());
        let mut r = vec![0.0; na + nb];
        for i in 0..na {
            for j in 0..nb {
                r[i] += t[i * nb + j];
                r[na + j] += t[i * nb + j];
            }
        }
        for (ri, m) in r.iter_mut().zip(self.a.iter().chain(&self.b)) {
            *ri = m - *ri;
        }
        let l1 = r.iter().map(|v| v.abs()).sum();
        (r, l1)
    }

    fn sweep(&self, f: &mut [f64], g: &mut [f64], la: &[f64], lb: &[f64], eps: f64) {
        let (na, nb) = (self.a.len(), self.b.len());
        let mut terms = vec![0.0; nb];
        for i in 0..na {
            for j in 0..nb {
                terms[j] = lb[j] + (g[j] - self.c[i * nb + j]) / eps;
            }
            f[i] = -eps * log_sum_exp(&terms);
        }
        let mut terms = vec![0.0; na];
        for j in 0..nb {
            for i in 0..na {
                terms[i] = la[i] + (f[i] - self.c[i * nb + j]) / eps;
            }
            g[j] = -eps * log_sum_exp(&terms);
        }
    }

    /// L1 row-marginal error; columns are exact right after a sweep.
    fn row_violation(&self, f: &[f64], g: &[f64], eps: f64) -> f64 {
        let nb = self.b.len();
        self.a
            .iter()
            .zip(f)
            .enumerate()
            .map(|(i, (ai, fi))| {
                let row: f64 = (0..nb)
                    .map(|j| self.b[j] * ((fi + g[j] - self.c[i * nb + j]) / eps).exp())
                    .sum();
                (ai * row - ai).abs()
            })
            .sum()
    }

    /// One damped Newton step on the concave dual
    /// `<f,a> + <g,b> - eps (sum T - 1)`, with the last entry of `g` pinned
    /// to remove the constant-shift null direction, with a backtracking
    /// Armijo search on the dual value.
    fn newton_step(&self, f: &mut [f64], g: &mut [f64], eps: f64) {
        let (na, nb) = (self.a.len(), self.b.len());
        let t = self.plan(f, g, eps);
        let (r, _) = self.residual(&t);
        let k = na + nb - 1;
        let mut h = DMatrix::<f64>::zeros(k, k);
        for i in 0..na {
            for j in 0..nb {
                let tij = t[i * nb + j];
                h[(i, i)] += tij;
                if j < nb - 1 {
                    h[(na + j, na + j)] += tij;
                    h[(i, na + j)] = tij;
                    h[(na + j, i)] = tij;
                }
            }
        }
        // symmetric Jacobi scaling keeps small-mass rows from wrecking pivots
        let d: Vec<f64> = (0..k)
            .map(|i| 1.0 / h[(i, i)].max(f64::MIN_POSITIVE).sqrt())
            .collect();
        for i in 0..k {
            for j in 0..k {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        let rhs = DVector::from_iterator(k, (0..k).map(|i| eps * r[i] * d[i]));
        // Underflowed plan entries can split the coupling graph and make the
        // Hessian singular, so a growing ridge keeps the solve definite.
        let mut ridge = 1e-12;
        let step = loop {
            if ridge > 1.0 {
                return;
            }
            let mut reg = h.clone();
            for i in 0..k {
                reg[(i, i)] += ridge;
            }
            if let Some(chol) = reg.cholesky() {
                let step = chol.solve(&rhs);
                if step.iter().all(|v| v.is_finite()) {
                    break step;
                }
            }
            ridge *= 100.0;
        };
        let delta: Vec<f64> = (0..k).map(|i| step[i] * d[i]).collect();
        let dual = |f: &[f64], g: &[f64], t: &[f64]| {
            dot(f, &self.a) + dot(g, &self.b) - eps * t.iter().sum::<f64>()
        };
        let d0 = dual(f, g, &t);
        // the residual is the dual gradient
        let slope: f64 = (0..k).map(|i| r[i] * delta[i]).sum();
        if !(slope > 0.0) {
            return;
        }
        let mut scale = 1.0;
        for _ in 0..30 {
            let nf: Vec<f64> = (0..na).map(|i| f[i] + scale * delta[i]).collect();
            let ng: Vec<f64> = (0..nb)
                .map(|j| {
                    g[j] + if j < nb - 1 {
                        scale * delta[na + j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let nt = self.plan(&nf, &ng, eps);
            if dual(&nf, &ng, &nt) >= d0 + 1e-4 * scale * slope {
                f.copy_from_slice(&nf);
                g.copy_from_slice(&ng);
                return;
            }
            scale *= 0.5;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}
