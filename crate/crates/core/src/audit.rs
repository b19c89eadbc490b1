//! Finite-difference audit of every differentiable operation.
//!
//! Each check records a random instance on a fresh tape, contracts the
//! output with a random constant weighting to a scalar, and compares the
//! tape's directional derivative with a central difference along a random
//! direction.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dgr::{self, DgrConfig, DgrParams};
use crate::error::{Error, Result};
use crate::gradcheck::{directional, CheckRow, STEP};
use crate::losses::{composite_on, si_on};
use crate::mask::{objective_on, MaskMode, MaskState, INITIAL_LOGIT};
use crate::ops::Pad;
use crate::ot::{combined_on, mse_on, BinGrid, OtSolver, OtdlConfig, OtdlTerm, SinkhornConfig};
use crate::predictor::{CnnToy, Predictor};
use crate::stencil::Stencil;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Instances per checked operation.
pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-5;
/// Looser bound for terms whose value comes from an iterative solver.
pub const SOLVER_TOLERANCE: f64 = 1e-3;
/// Difference step for solver-backed terms, large enough to dominate
/// solver noise.
const SOLVER_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Dgr,
    Otdl,
    Losses,
    All,
}

impl Scope {
    pub const SUITES: [Scope; 4] = [Scope::Tensor, Scope::Dgr, Scope::Otdl, Scope::Losses];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Dgr => "dgr",
            Scope::Otdl => "otdl",
            Scope::Losses => "losses",
            Scope::All => "all",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Scope::Tensor),
            "dgr" => Ok(Scope::Dgr),
            "otdl" => Ok(Scope::Otdl),
            "losses" => Ok(Scope::Losses),
            "all" => Ok(Scope::All),
            other => Err(Error::invalid(format!(
                "unknown scope {other:?}; expected tensor, dgr, otdl, losses or all"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub check: CheckRow,
    pub tolerance: f64,
}

impl AuditRow {
    pub fn passes(&self) -> bool {
        self.check.passes(self.tolerance)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
}

pub const CSV_HEADER: &str = "name,analytic,numeric,rel_err";

impl AuditReport {
    pub fn failures(&self) -> Vec<&AuditRow> {
        self.rows.iter().filter(|r| !r.passes()).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let c = &r.check;
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                c.name, c.analytic, c.numeric, c.rel_err
            ));
        }
        out
    }
}

/// Runs the named suite, or every suite in order for [`Scope::All`]. Each
/// suite draws from its own stream, so `all` is exactly the concatenation
/// of the individual reports.
pub fn run(scope: Scope, seed: u64) -> Result<AuditReport> {
    let suites: &[Scope] = match scope {
        Scope::All => &Scope::SUITES,
        _ => std::slice::from_ref(&scope),
    };
    let mut report = AuditReport::default();
    for (i, &suite) in Scope::SUITES.iter().enumerate() {
        if !suites.contains(&suite) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut auditor = Auditor {
            rng,
            rows: Vec::new(),
        };
        match suite {
            Scope::Tensor => tensor_suite(&mut auditor)?,
            Scope::Dgr => dgr_suite(&mut auditor)?,
            Scope::Otdl => otdl_suite(&mut auditor)?,
            Scope::Losses => losses_suite(&mut auditor)?,
            Scope::All => unreachable!("not a suite"),
        }
        report.rows.extend(auditor.rows);
    }
    Ok(report)
}

type Build<'a> = dyn FnMut(&mut Tape, &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)> + 'a;

struct Auditor {
    rng: ChaCha8Rng,
    rows: Vec<AuditRow>,
}

impl Auditor {
    fn check(
        &mut self,
        name: &str,
        tolerance: f64,
        step: f64,
        build: &mut Build<'_>,
    ) -> Result<()> {
        for k in 0..INSTANCES {
            let mut tape = Tape::new();
            let (out, leaves) = build(&mut tape, &mut self.rng)?;
            let shape = tape.value(out).shape().to_vec();
            let weights = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut self.rng));
            let weighted = tape.mul(out, weights)?;
            let loss = tape.sum(weighted)?;
            let (analytic, numeric) = directional(&mut tape, loss, &leaves, step, &mut self.rng)?;
            self.rows.push(AuditRow {
                check: CheckRow::new(format!("{name}#{k:02}"), analytic, numeric),
                tolerance,
            });
        }
        Ok(())
    }

    fn exact(&mut self, name: &str, build: &mut Build<'_>) -> Result<()> {
        self.check(name, TOLERANCE, STEP, build)
    }
}

/// Values bounded away from zero, so kinks at 0 are never straddled.
fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn chw(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [
        rng.gen_range(1..=3),
        rng.gen_range(3..=6),
        rng.gen_range(3..=6),
    ]
}

/// Large enough for the 5x5 stencils.
fn chw5(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [
        rng.gen_range(1..=3),
        rng.gen_range(5..=7),
        rng.gen_range(5..=7),
    ]
}

fn unary(
    a: &mut Auditor,
    name: &str,
    draw: fn(&[usize], &mut ChaCha8Rng) -> Tensor,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Result<()> {
    a.exact(name, &mut |t, r| {
        let s = chw(r);
        let x = t.param(draw(&s, r));
        Ok((op(t, x)?, vec![x]))
    })
}

fn binary(
    a: &mut Auditor,
    name: &str,
    per_channel: bool,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<()> {
    a.exact(name, &mut |t, r| {
        let s = chw(r);
        let x = t.param(signed(&s, r));
        let y = if per_channel {
            positive(&s[..1], r)
        } else {
            positive(&s, r)
        };
        let y = t.param(y);
        Ok((op(t, x, y)?, vec![x, y]))
    })
}

fn tensor_suite(a: &mut Auditor) -> Result<()> {
    for (label, per_channel) in [("", false), ("_per_channel", true)] {
        binary(a, &format!("tensor/add{label}"), per_channel, Tape::add)?;
        binary(a, &format!("tensor/sub{label}"), per_channel, Tape::sub)?;
        binary(a, &format!("tensor/mul{label}"), per_channel, Tape::mul)?;
        binary(a, &format!("tensor/div{label}"), per_channel, Tape::div)?;
    }
    unary(a, "tensor/relu", signed, Tape::relu)?;
    unary(a, "tensor/sigmoid", signed, Tape::sigmoid)?;
    unary(a, "tensor/ln", positive, Tape::ln)?;
    unary(a, "tensor/abs", signed, Tape::abs)?;
    unary(a, "tensor/exp", signed, Tape::exp)?;
    unary(a, "tensor/sqrt", positive, Tape::sqrt)?;
    unary(a, "tensor/square", signed, Tape::square)?;
    unary(a, "tensor/sum", signed, Tape::sum)?;
    unary(a, "tensor/mean", signed, Tape::mean)?;
    unary(a, "tensor/gap", signed, Tape::gap)?;
    unary(a, "tensor/scale", signed, |t, x| t.scale(x, -1.7))?;
    unary(a, "tensor/offset", signed, |t, x| t.offset(x, 0.3))?;

    a.exact("tensor/fully_connected", &mut |t, r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let x = t.param(signed(&[n], r));
        let w = t.param(signed(&[m, n], r));
        let b = t.param(signed(&[m], r));
        Ok((t.fully_connected(x, w, b)?, vec![x, w, b]))
    })?;
    for bias in [true, false] {
        let name = if bias {
            "tensor/linear"
        } else {
            "tensor/linear_no_bias"
        };
        a.exact(name, &mut |t, r| {
            let (n, k, m) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
            let x = t.param(signed(&[n, k], r));
            let w = t.param(signed(&[k, m], r));
            let mut leaves = vec![x, w];
            let b = bias.then(|| t.param(signed(&[m], r)));
            leaves.extend(b);
            Ok((t.linear(x, w, b)?, leaves))
        })?;
    }
    a.exact("tensor/matmul", &mut |t, r| {
        let (n, k, m) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = t.param(signed(&[n, k], r));
        let y = t.param(signed(&[k, m], r));
        Ok((t.matmul(x, y)?, vec![x, y]))
    })?;
    a.exact("tensor/transpose", &mut |t, r| {
        let x = t.param(signed(&[r.gen_range(1..=4), r.gen_range(1..=4)], r));
        Ok((t.transpose(x)?, vec![x]))
    })?;
    a.exact("tensor/softmax_rows", &mut |t, r| {
        let x = t.param(signed(&[r.gen_range(1..=4), r.gen_range(2..=5)], r));
        Ok((t.softmax_rows(x)?, vec![x]))
    })?;
    for pad in [Pad::Zero, Pad::Replicate] {
        a.exact(
            &format!("tensor/conv2d_{pad:?}").to_lowercase(),
            &mut |t, r| {
                let [c, h, w] = chw(r);
                let o = r.gen_range(1..=3);
                let k = *[1usize, 3].choose(r).expect("non-empty");
                let x = t.param(signed(&[c, h, w], r));
                let wt = t.param(signed(&[o, c, k, k], r));
                let b = t.param(signed(&[o], r));
                Ok((t.conv2d(x, wt, Some(b), pad)?, vec![x, wt, b]))
            },
        )?;
    }
    let stencils = [
        ("laplacian", Stencil::laplacian()),
        ("third_order", Stencil::third_order()),
        ("third_order_x", Stencil::third_order_x()),
        ("third_order_y", Stencil::third_order_y()),
        ("central_x", Stencil::central_x()),
        ("central_y", Stencil::central_y()),
    ];
    for (label, stencil) in &stencils {
        for pad in [Pad::Zero, Pad::Replicate] {
            a.exact(
                &format!("tensor/stencil_{label}_{pad:?}").to_lowercase(),
                &mut |t, r| {
                    let x = t.param(signed(&chw5(r), r));
                    Ok((t.stencil(x, stencil, pad)?, vec![x]))
                },
            )?;
        }
    }
    a.exact("tensor/concat_channels", &mut |t, r| {
        let [_, h, w] = chw(r);
        let parts: Vec<Var> = (0..r.gen_range(1..=3))
            .map(|_| {
                let c = r.gen_range(1..=2);
                t.param(signed(&[c, h, w], r))
            })
            .collect();
        Ok((t.concat_channels(&parts)?, parts))
    })?;
    a.exact("tensor/outer_channels", &mut |t, r| {
        let s = chw(r);
        let x = t.param(signed(&s, r));
        let y = t.param(signed(&s, r));
        Ok((t.outer_channels(x, y)?, vec![x, y]))
    })?;
    a.exact("tensor/gather", &mut |t, r| {
        let s = chw(r);
        let x = t.param(signed(&s, r));
        let n: usize = s.iter().product();
        let count = r.gen_range(1..=2 * n);
        let index: Arc<[usize]> = (0..count).map(|_| r.gen_range(0..n)).collect();
        Ok((t.gather(x, index, &[count])?, vec![x]))
    })?;
    a.exact("tensor/reshape", &mut |t, r| {
        let s = chw(r);
        let x = t.param(signed(&s, r));
        Ok((t.reshape(x, &[s[0] * s[1], s[2]])?, vec![x]))
    })?;
    Ok(())
}

fn dgr_instance(r: &mut ChaCha8Rng, residual: bool) -> Result<(DgrConfig, DgrParams, Tensor)> {
    let c = r.gen_range(1..=3);
    let reduction = *[1usize, 3].choose(r).expect("non-empty");
    let rank = r.gen_range(1..=3);
    let cfg = DgrConfig {
        residual,
        ..DgrConfig::new(c, reduction, rank)?
    };
    let params = DgrParams::init(&cfg, r);
    let x = signed(&[c, r.gen_range(5..=7), r.gen_range(5..=7)], r);
    Ok((cfg, params, x))
}

fn dgr_suite(a: &mut Auditor) -> Result<()> {
    a.exact("dgr/merge", &mut |t, r| {
        let (_, _, x) = dgr_instance(r, false)?;
        let x = t.param(x);
        Ok((dgr::merge_on(t, x)?, vec![x]))
    })?;
    a.exact("dgr/channel_weights", &mut |t, r| {
        let (_, p, x) = dgr_instance(r, false)?;
        let p = p.register(t, true);
        let x = t.param(x);
        let m = dgr::merge_on(t, x)?;
        let mut leaves = vec![x];
        leaves.extend(p.all());
        Ok((dgr::channel_weights_on(t, m, &p)?, leaves))
    })?;
    a.exact("dgr/spatial_refine", &mut |t, r| {
        let (cfg, p, x) = dgr_instance(r, false)?;
        let p = p.register(t, true);
        let m = t.param(signed(&[cfg.merged(), x.shape()[1], x.shape()[2]], r));
        let w = t.param(Tensor::uniform(&[cfg.merged()], 0.1, 0.9, r));
        let mut leaves = vec![m, w];
        leaves.extend(p.all());
        Ok((dgr::spatial_refine_on(t, m, w, &p)?, leaves))
    })?;
    a.exact("dgr/interact", &mut |t, r| {
        let (cfg, p, x) = dgr_instance(r, false)?;
        let p = p.register(t, true);
        let shape = [cfg.merged(), x.shape()[1], x.shape()[2]];
        let s = t.param(signed(&shape, r));
        let m = t.param(signed(&shape, r));
        let mut leaves = vec![s, m];
        leaves.extend(p.all());
        Ok((dgr::interact_on(t, s, m, &p)?, leaves))
    })?;
    for residual in [false, true] {
        let name = if residual {
            "dgr/forward_residual"
        } else {
            "dgr/forward"
        };
        a.exact(name, &mut |t, r| {
            let (cfg, p, x) = dgr_instance(r, residual)?;
            let p = p.register(t, true);
            let x = t.param(x);
            let mut leaves = vec![x];
            leaves.extend(p.all());
            Ok((dgr::forward_on(t, x, &p, &cfg)?, leaves))
        })?;
    }
    Ok(())
}

fn otdl_config(r: &mut ChaCha8Rng) -> Result<OtdlConfig> {
    Ok(OtdlConfig {
        grid: BinGrid::new(0.0, 4.0, r.gen_range(4..=10))?,
        softness: r.gen_range(1.0..2.0),
        solver: OtSolver::Sinkhorn(SinkhornConfig::default()),
    })
}

fn depth_pair(r: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let shape = [r.gen_range(3..=6), r.gen_range(3..=6)];
    (
        Tensor::uniform(&shape, 0.3, 3.7, r),
        Tensor::uniform(&shape, 0.3, 3.7, r),
    )
}

fn otdl_suite(a: &mut Auditor) -> Result<()> {
    a.check(
        "otdl/sinkhorn",
        SOLVER_TOLERANCE,
        SOLVER_STEP,
        &mut |t, r| {
            let cfg = otdl_config(r)?;
            let (pred, gt) = depth_pair(r);
            let x = t.param(pred);
            Ok((t.map(x, Arc::new(OtdlTerm::new(&gt, &cfg)?))?, vec![x]))
        },
    )?;
    a.check(
        "otdl/combined",
        SOLVER_TOLERANCE,
        SOLVER_STEP,
        &mut |t, r| {
            let cfg = otdl_config(r)?;
            let lambda = r.gen_range(0.5..2.0);
            let (pred, gt) = depth_pair(r);
            let x = t.param(pred);
            Ok((combined_on(t, x, &gt, lambda, &cfg)?, vec![x]))
        },
    )?;
    Ok(())
}

fn losses_suite(a: &mut Auditor) -> Result<()> {
    for masked in [false, true] {
        let name = if masked {
            "losses/composite_masked"
        } else {
            "losses/composite"
        };
        a.exact(name, &mut |t, r| {
            let (pred, gt) = depth_pair(r);
            let valid = masked.then(|| {
                let mut m = Tensor::zeros(gt.shape());
                m.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = f64::from(r.gen_bool(0.7)));
                m.data_mut()[0] = 1.0;
                m
            });
            let x = t.param(pred);
            let y = t.param(gt);
            Ok((composite_on(t, x, y, valid.as_ref())?.total, vec![x, y]))
        })?;
    }
    a.exact("losses/si", &mut |t, r| {
        let (pred, gt) = depth_pair(r);
        let x = t.param(pred);
        let y = t.param(gt);
        Ok((si_on(t, x, y)?, vec![x, y]))
    })?;
    a.exact("losses/mse", &mut |t, r| {
        let (pred, gt) = depth_pair(r);
        let x = t.param(pred);
        let y = t.param(gt);
        Ok((mse_on(t, x, y)?, vec![x, y]))
    })?;
    for mode in [MaskMode::Network, MaskMode::Free] {
        let name = match mode {
            MaskMode::Network => "losses/mask_objective_network",
            MaskMode::Free => "losses/mask_objective_free",
        };
        a.exact(name, &mut |t, r| {
            let (h, w) = (r.gen_range(5..=7), r.gen_range(5..=7));
            let predictor = CnnToy::new(r.gen(), r.gen_bool(0.5))?;
            let mut state = MaskState::new(mode, h, w, r.gen_range(0.0..4.0), 0.5, r.gen())?;
            // perturb, and move the output logits from the saturated initial
            // value to where the sigmoid is sensitive
            let last = state.params.len() - 1;
            let perturbed = state
                .params
                .tensors()
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let shift = if i == last { INITIAL_LOGIT } else { 0.0 };
                    p.zip_map(&signed(p.shape(), r), |a, b| a + b - shift)
                })
                .collect::<Result<Vec<_>>>()?;
            state.params.set_tensors(perturbed)?;
            let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, r);
            let full = predictor.predict(&image)?;
            let params = state.params.register(t, true);
            Ok((
                objective_on(t, &state, &params, &predictor, &image, &full)?,
                params,
            ))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in [
            Scope::Tensor,
            Scope::Dgr,
            Scope::Otdl,
            Scope::Losses,
            Scope::All,
        ] {
            assert_eq!(s.as_str().parse::<Scope>().unwrap(), s);
        }
        assert!("ot".parse::<Scope>().is_err());
    }

    #[test]
    fn a_wrong_gradient_is_reported() {
        #[derive(Debug)]
        struct Wrong;
        impl crate::tape::ScalarMap for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
                Ok((x.data().iter().map(|v| v * v).sum(), x.map(|v| 3.0 * v)))
            }
        }
        let mut a = Auditor {
            rng: ChaCha8Rng::seed_from_u64(0),
            rows: Vec::new(),
        };
        a.exact("wrong", &mut |t, r| {
            let x = t.param(signed(&[3], r));
            Ok((t.map(x, Arc::new(Wrong))?, vec![x]))
        })
        .unwrap();
        let report = AuditReport { rows: a.rows };
        assert_eq!(report.failures().len(), INSTANCES);
    }
}
