//! The OT depth loss, the MSE term and their combination.

use std::sync::Arc;

use super::sinkhorn::sinkhorn_masses;
use super::{
    exact_1d, lp, normalize, sinkhorn, soft_weights, BinGrid, CostMatrix, OtSolution,
    SinkhornConfig,
};
use crate::error::{Error, Result};
use crate::tape::{ScalarMap, Tape, Var};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum OtSolver {
    #[default]
    Exact1d,
    Lp,
    Sinkhorn(SinkhornConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtdlConfig {
    pub grid: BinGrid,
    /// Soft-binning kernel half-width in bin widths; 0 is a hard histogram.
    pub softness: f64,
    pub solver: OtSolver,
}

impl Default for OtdlConfig {
    fn default() -> Self {
        Self {
            grid: BinGrid::default(),
            softness: 0.0,
            solver: OtSolver::Exact1d,
        }
    }
}

impl OtdlConfig {
    /// Settings for the differentiable path: the configured Sinkhorn
    /// parameters, or the defaults for the exact solvers.
    pub fn sinkhorn_config(&self) -> SinkhornConfig {
        match self.solver {
            OtSolver::Sinkhorn(c) => c,
            _ => SinkhornConfig::default(),
        }
    }
}

fn same_shape(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

/// Transport cost and plan between the depth histograms of `pred` and `gt`.
pub fn otdl_solution(pred: &Tensor, gt: &Tensor, cfg: &OtdlConfig) -> Result<OtSolution> {
    same_shape("otdl", pred, gt)?;
    let p = normalize(pred, &cfg.grid, cfg.softness)?;
    let q = normalize(gt, &cfg.grid, cfg.softness)?;
    match cfg.solver {
        OtSolver::Exact1d => exact_1d(&p, &q),
        OtSolver::Lp => lp(&p, &q, &CostMatrix::from_centers(p.bins())?),
        OtSolver::Sinkhorn(s) => {
            let sol = sinkhorn(&p, &q, &CostMatrix::from_centers(p.bins())?, &s)?;
            Ok(OtSolution {
                cost: sol.cost,
                plan: sol.plan,
            })
        }
    }
}

pub fn otdl(pred: &Tensor, gt: &Tensor, cfg: &OtdlConfig) -> Result<f64> {
    Ok(otdl_solution(pred, gt, cfg)?.cost)
}

/// Fixed ground-truth side of the smooth loss.
#[derive(Clone, Debug)]
struct Target {
    shape: Vec<usize>,
    mass: Vec<f64>,
    self_value: f64,
    costs: CostMatrix,
    centers: Vec<f64>,
}

impl Target {
    fn new(gt: &Tensor, cfg: &OtdlConfig) -> Result<Self> {
        if !(cfg.softness > 0.0) {
            return Err(Error::invalid(
                "the differentiable OT loss needs soft binning (softness > 0); hard histograms have no gradient",
            ));
        }
        let q = normalize(gt, &cfg.grid, cfg.softness)?;
        let centers = cfg.grid.centers();
        let costs = CostMatrix::from_centers(&centers)?;
        let (self_value, _) = self_term(q.mass(), &costs, &cfg.sinkhorn_config())?;
        Ok(Self {
            shape: gt.shape().to_vec(),
            mass: q.mass().to_vec(),
            self_value,
            costs,
            centers,
        })
    }
}

fn solve(
    a: &[f64],
    b: &[f64],
    m: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<super::SinkhornSolution> {
    let s = sinkhorn_masses(a, b, m, cfg)?;
    if !s.converged {
        return Err(Error::Solver(format!(
            "Sinkhorn stopped after {} iterations with marginal violation {:.3e}",
            s.iterations, s.violation
        )));
    }
    Ok(s)
}

/// Entropic value of `(a, a)` and its symmetric potential.
fn self_term(a: &[f64], m: &CostMatrix, cfg: &SinkhornConfig) -> Result<(f64, Vec<f64>)> {
    let s = solve(a, a, m, cfg)?;
    let h = s.f.iter().zip(&s.g).map(|(f, g)| 0.5 * (f + g)).collect();
    Ok((s.entropic, h))
}

fn smooth_value_and_grad(
    pred: &Tensor,
    target: &Target,
    cfg: &OtdlConfig,
) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape.as_slice() {
        return Err(Error::shape(
            "otdl_smooth",
            format!("pred {:?} vs gt {:?}", pred.shape(), target.shape),
        ));
    }
    let scfg = cfg.sinkhorn_config();
    let a = normalize(pred, &cfg.grid, cfg.softness)?;
    let cross = solve(a.mass(), &target.mass, &target.costs, &scfg)?;
    let (self_value, h) = self_term(a.mass(), &target.costs, &scfg)?;
    let value = cross.entropic - 0.5 * self_value - 0.5 * target.self_value;

    // d value / d histogram, through the mass floor
    let floor_scale = 1.0 / (1.0 + a.len() as f64 * super::MASS_FLOOR);
    let per_bin: Vec<f64> = cross
        .f
        .iter()
        .zip(&h)
        .map(|(f, h)| (f - h) * floor_scale)
        .collect();
    let n = pred.len() as f64;
    let grad = pred.map(|v| {
        soft_weights(v, &cfg.grid, &target.centers, cfg.softness)
            .into_iter()
            .map(|(b, _, dw)| per_bin[b] * dw)
            .sum::<f64>()
            / n
    });
    Ok((value, grad))
}

/// Debiased entropic OT divergence between the soft histograms of `pred`
/// and `gt`: `W(a,b) - W(a,a)/2 - W(b,b)/2` with `W` the entropic value.
/// It is zero at `pred = gt` and smooth in `pred`.
pub fn otdl_smooth(pred: &Tensor, gt: &Tensor, cfg: &OtdlConfig) -> Result<f64> {
    same_shape("otdl_smooth", pred, gt)?;
    Ok(smooth_value_and_grad(pred, &Target::new(gt, cfg)?, cfg)?.0)
}

/// Gradient of [`otdl_smooth`] with respect to `pred`.
pub fn otdl_gradient(pred: &Tensor, gt: &Tensor, cfg: &OtdlConfig) -> Result<Tensor> {
    same_shape("otdl_gradient", pred, gt)?;
    Ok(smooth_value_and_grad(pred, &Target::new(gt, cfg)?, cfg)?.1)
}

/// [`otdl_smooth`] against a fixed ground truth, as a tape node.
#[derive(Debug)]
pub struct OtdlTerm {
    cfg: OtdlConfig,
    target: Target,
}

impl OtdlTerm {
    pub fn new(gt: &Tensor, cfg: &OtdlConfig) -> Result<Self> {
        Ok(Self {
            cfg: *cfg,
            target: Target::new(gt, cfg)?,
        })
    }
}

impl ScalarMap for OtdlTerm {
    fn name(&self) -> &'static str {
        "otdl"
    }

    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        smooth_value_and_grad(x, &self.target, &self.cfg)
    }
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("mse", pred, gt)?;
    let sq: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, q)| (p - q) * (p - q))
        .collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

pub fn mse_on(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_otdl must be >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// `mse + lambda * otdl` with the configured solver.
pub fn combined_loss(pred: &Tensor, gt: &Tensor, lambda: f64, cfg: &OtdlConfig) -> Result<f64> {
    check_lambda(lambda)?;
    let base = mse(pred, gt)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    Ok(base + lambda * otdl(pred, gt, cfg)?)
}

/// Differentiable `mse + lambda * otdl_smooth` on a tape.
pub fn combined_on(
    tape: &mut Tape,
    pred: Var,
    gt: &Tensor,
    lambda: f64,
    cfg: &OtdlConfig,
) -> Result<Var> {
    check_lambda(lambda)?;
    let target = tape.constant(gt.clone());
    let base = mse_on(tape, pred, target)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    let term = tape.map(pred, Arc::new(OtdlTerm::new(gt, cfg)?))?;
    let term = tape.scale(term, lambda)?;
    tape.add(base, term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient_fn};
    use crate::ot::Epsilon;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn integer_grid() -> BinGrid {
        BinGrid::new(-0.5, 9.5, 10).unwrap()
    }

    fn soft_cfg(eps: f64) -> OtdlConfig {
        OtdlConfig {
            grid: BinGrid::new(0.0, 4.0, 8).unwrap(),
            softness: 1.5,
            solver: OtSolver::Sinkhorn(SinkhornConfig::with_epsilon(Epsilon::Relative(eps))),
        }
    }

    fn random_map(h: usize, w: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        Tensor::uniform(&[h, w], lo, hi, rng)
    }

    #[test]
    fn identical_maps_have_zero_loss_for_every_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_map(6, 6, 0.0, 9.0, &mut rng);
        for solver in [OtSolver::Exact1d, OtSolver::Lp] {
            let cfg = OtdlConfig {
                grid: integer_grid(),
                softness: 0.0,
                solver,
            };
            assert_eq!(otdl(&gt, &gt, &cfg).unwrap(), 0.0);
        }
        let cfg = OtdlConfig {
            grid: integer_grid(),
            softness: 0.0,
            solver: OtSolver::Sinkhorn(SinkhornConfig::with_epsilon(Epsilon::Relative(1e-4))),
        };
        assert!(otdl(&gt, &gt, &cfg).unwrap() < 1e-9);
    }

    #[test]
    fn sub_bin_shift_is_invisible_to_hard_histograms() {
        let gt = Tensor::from_fn(&[4, 4], |i| (i[0] + i[1]) as f64);
        let pred = gt.map(|v| v + 0.2);
        let cfg = OtdlConfig {
            grid: integer_grid(),
            ..Default::default()
        };
        assert_eq!(otdl(&pred, &gt, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn constant_maps_three_apart_cost_nine() {
        let cfg = OtdlConfig {
            grid: integer_grid(),
            ..Default::default()
        };
        let (pred, gt) = (Tensor::full(&[3, 3], 2.0), Tensor::full(&[3, 3], 5.0));
        assert_eq!(otdl(&pred, &gt, &cfg).unwrap(), 9.0);
    }

    #[test]
    fn mse_examples_and_loop_oracle() {
        assert_eq!(
            mse(
                &Tensor::from_vec(vec![1.0, 2.0]),
                &Tensor::from_vec(vec![1.0, 4.0])
            )
            .unwrap(),
            2.0
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (
            random_map(5, 7, -1.0, 1.0, &mut rng),
            random_map(5, 7, -1.0, 1.0, &mut rng),
        );
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((mse(&a, &b).unwrap() - acc / a.len() as f64).abs() < 1e-14);
        assert!(mse(&a, &Tensor::zeros(&[7, 5])).is_err());
    }

    #[test]
    fn combined_loss_composes_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = OtdlConfig {
            grid: integer_grid(),
            ..Default::default()
        };
        let (p, g) = (
            random_map(4, 4, 0.0, 9.0, &mut rng),
            random_map(4, 4, 0.0, 9.0, &mut rng),
        );
        assert_eq!(
            combined_loss(&p, &g, 0.0, &cfg).unwrap(),
            mse(&p, &g).unwrap()
        );
        for lambda in [0.0, 0.5, 3.0] {
            assert_eq!(combined_loss(&g, &g, lambda, &cfg).unwrap(), 0.0);
        }
        let expected = mse(&p, &g).unwrap() + 0.7 * otdl(&p, &g, &cfg).unwrap();
        assert!((combined_loss(&p, &g, 0.7, &cfg).unwrap() - expected).abs() < 1e-12);
        assert!(combined_loss(&p, &g, -1.0, &cfg).is_err());
    }

    #[test]
    fn gradient_requires_soft_binning() {
        let t = Tensor::full(&[2, 2], 1.0);
        assert!(otdl_gradient(&t, &t, &OtdlConfig::default()).is_err());
    }

    #[test]
    fn gradient_vanishes_at_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_map(5, 5, 0.3, 3.7, &mut rng);
        let cfg = soft_cfg(1e-2);
        assert!(otdl_smooth(&gt, &gt, &cfg).unwrap().abs() < 1e-9);
        let g = otdl_gradient(&gt, &gt, &cfg).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-8), "{:?}", g.data());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = soft_cfg(1e-2);
        for _ in 0..5 {
            let gt = random_map(4, 4, 0.3, 3.7, &mut rng);
            let pred = random_map(4, 4, 0.3, 3.7, &mut rng);
            let analytic = otdl_gradient(&pred, &gt, &cfg).unwrap();
            let numeric = numeric_gradient_fn(|x| otdl_smooth(x, &gt, &cfg), &pred, 1e-5).unwrap();
            let err = max_relative_error(&analytic, &numeric).unwrap();
            assert!(err < 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn prediction_above_target_is_pushed_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = soft_cfg(1e-2);
        let gt = random_map(6, 6, 0.3, 2.5, &mut rng);
        let pred = gt.map(|v| v + 1.0);
        assert!(otdl_gradient(&pred, &gt, &cfg).unwrap().mean() >= 0.0);
    }

    #[test]
    fn tape_term_matches_the_functional_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = soft_cfg(1e-2);
        let gt = random_map(4, 4, 0.3, 3.7, &mut rng);
        let p0 = random_map(4, 4, 0.3, 3.7, &mut rng);
        let mut tape = Tape::new();
        let pred = tape.param(p0.clone());
        let loss = combined_on(&mut tape, pred, &gt, 0.5, &cfg).unwrap();
        let expected = mse(&p0, &gt).unwrap() + 0.5 * otdl_smooth(&p0, &gt, &cfg).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let mse_grad = p0
            .zip_map(&gt, |p, q| 2.0 * (p - q) / p0.len() as f64)
            .unwrap();
        let ot_grad = otdl_gradient(&p0, &gt, &cfg).unwrap();
        let want = mse_grad.zip_map(&ot_grad, |a, b| a + 0.5 * b).unwrap();
        assert!(grads.of(pred).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }
}
