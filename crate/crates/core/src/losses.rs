//! Composite and scale-invariant depth losses, and evaluation metrics.
//!
//! The composite loss applies `F(x) = ln(x + 0.5)` to absolute depth
//! errors and to absolute central differences of the error, and adds a
//! surface-normal term `1 - cos` between normals `(-d_x, -d_y, 1)` of the
//! prediction and the ground truth. Means run over valid pixels only.
//! Sums are accumulated relative to `F(0) = ln 0.5`, so a perfect
//! prediction scores exactly `3 ln 0.5`.

use crate::error::{Error, Result};
use crate::ops::{apply_stencil, Pad};
use crate::stencil::Stencil;
use crate::tape::{Tape, Var};
use crate::tensor::{pairwise_sum, Tensor};

/// `F(0)`, the per-term minimum of the composite loss.
pub fn ln_half() -> f64 {
    0.5f64.ln()
}

fn f_abs(x: f64) -> f64 {
    (x.abs() + 0.5).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub depth_term: f64,
    pub grad_term: f64,
    pub normal_term: f64,
    pub total: f64,
}

/// Validity weights (1 valid, 0 invalid) and the valid count.
fn validity(shape: &[usize], valid: Option<&Tensor>) -> Result<(Tensor, usize)> {
    let w = match valid {
        Some(m) => {
            if m.shape() != shape {
                return Err(Error::shape(
                    "validity",
                    format!("mask {:?} vs depth {shape:?}", m.shape()),
                ));
            }
            m.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
        }
        None => Tensor::ones(shape),
    };
    let n = w.data().iter().filter(|&&v| v != 0.0).count();
    if n == 0 {
        return Err(Error::invalid("no valid pixels"));
    }
    Ok((w, n))
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

/// `base + (1/n) Σ w_i (x_i - base)`.
fn centered_mean(x: &[f64], w: &[f64], n: usize, base: f64) -> f64 {
    let terms: Vec<f64> = x.iter().zip(w).map(|(v, w)| w * (v - base)).collect();
    base + pairwise_sum(&terms) / n as f64
}

pub fn composite_loss(pred: &Tensor, gt: &Tensor) -> Result<LossBreakdown> {
    composite_loss_masked(pred, gt, None)
}

/// Composite loss over pixels where `valid` is nonzero (all pixels when
/// `None`).
pub fn composite_loss_masked(
    pred: &Tensor,
    gt: &Tensor,
    valid: Option<&Tensor>,
) -> Result<LossBreakdown> {
    same_shape("composite_loss", pred, gt)?;
    let (w, n) = validity(pred.shape(), valid)?;
    let w = w.data();
    let (cx, cy) = (Stencil::central_x(), Stencil::central_y());
    let e = pred.zip_map(gt, |p, g| p - g)?;
    let ex = apply_stencil(&e, &cx, Pad::Replicate)?;
    let ey = apply_stencil(&e, &cy, Pad::Replicate)?;
    let (px, py) = (
        apply_stencil(pred, &cx, Pad::Replicate)?,
        apply_stencil(pred, &cy, Pad::Replicate)?,
    );
    let (gx, gy) = (
        apply_stencil(gt, &cx, Pad::Replicate)?,
        apply_stencil(gt, &cy, Pad::Replicate)?,
    );

    let base = ln_half();
    let fe: Vec<f64> = e.data().iter().map(|&v| f_abs(v)).collect();
    let depth_term = centered_mean(&fe, w, n, base);
    let fg: Vec<f64> = ex
        .data()
        .iter()
        .zip(ey.data())
        .map(|(&a, &b)| (f_abs(a) - base) + (f_abs(b) - base))
        .collect();
    let grad_term = centered_mean(&fg, w, n, 0.0) + 2.0 * base;
    let nt: Vec<f64> = (0..pred.len())
        .map(|i| 1.0 - normal_cos(px.data()[i], py.data()[i], gx.data()[i], gy.data()[i]))
        .collect();
    let normal_term = centered_mean(&nt, w, n, 0.0);
    Ok(LossBreakdown {
        depth_term,
        grad_term,
        normal_term,
        total: depth_term + grad_term + normal_term,
    })
}

/// Cosine between `(-ax, -ay, 1)` and `(-bx, -by, 1)`.
fn normal_cos(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dot = ax * bx + ay * by + 1.0;
    let na = ax * ax + ay * ay + 1.0;
    let nb = bx * bx + by * by + 1.0;
    dot / (na * nb).sqrt()
}

/// Tape nodes of the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub depth_term: Var,
    pub grad_term: Var,
    pub normal_term: Var,
    pub total: Var,
}

/// `base + (1/n) Σ w_i x_i` on the tape, with `x` already centered.
fn weighted_mean_on(tape: &mut Tape, x: Var, w: Option<Var>, n: usize, base: f64) -> Result<Var> {
    let x = match w {
        Some(w) => tape.mul(x, w)?,
        None => x,
    };
    let s = tape.sum(x)?;
    let m = tape.scale(s, 1.0 / n as f64)?;
    tape.offset(m, base)
}

/// `F(|x|) - ln 0.5` on the tape.
fn f_centered_on(tape: &mut Tape, x: Var) -> Result<Var> {
    let a = tape.abs(x)?;
    let a = tape.offset(a, 0.5)?;
    let l = tape.ln(a)?;
    tape.offset(l, -ln_half())
}

pub fn composite_on(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    valid: Option<&Tensor>,
) -> Result<LossTerms> {
    let shape = tape.value(pred).shape().to_vec();
    if tape.value(gt).shape() != shape.as_slice() {
        return Err(Error::shape(
            "composite_loss",
            format!("pred {shape:?} vs gt {:?}", tape.value(gt).shape()),
        ));
    }
    let (w, n) = validity(&shape, valid)?;
    let w = valid.map(|_| tape.constant(w));
    let (cx, cy) = (Stencil::central_x(), Stencil::central_y());
    let base = ln_half();

    let e = tape.sub(pred, gt)?;
    let fe = f_centered_on(tape, e)?;
    let depth_term = weighted_mean_on(tape, fe, w, n, base)?;

    let ex = tape.stencil(e, &cx, Pad::Replicate)?;
    let ey = tape.stencil(e, &cy, Pad::Replicate)?;
    let (fx, fy) = (f_centered_on(tape, ex)?, f_centered_on(tape, ey)?);
    let fg = tape.add(fx, fy)?;
    let grad_term = weighted_mean_on(tape, fg, w, n, 0.0)?;
    let grad_term = tape.offset(grad_term, 2.0 * base)?;

    let px = tape.stencil(pred, &cx, Pad::Replicate)?;
    let py = tape.stencil(pred, &cy, Pad::Replicate)?;
    let gx = tape.stencil(gt, &cx, Pad::Replicate)?;
    let gy = tape.stencil(gt, &cy, Pad::Replicate)?;
    let dot = {
        let a = tape.mul(px, gx)?;
        let b = tape.mul(py, gy)?;
        let s = tape.add(a, b)?;
        tape.offset(s, 1.0)?
    };
    let mut norm_sq = |x: Var, y: Var| -> Result<Var> {
        let a = tape.square(x)?;
        let b = tape.square(y)?;
        let s = tape.add(a, b)?;
        tape.offset(s, 1.0)
    };
    let na = norm_sq(px, py)?;
    let nb = norm_sq(gx, gy)?;
    let prod = tape.mul(na, nb)?;
    let root = tape.sqrt(prod)?;
    let cos = tape.div(dot, root)?;
    let neg = tape.scale(cos, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let normal_term = weighted_mean_on(tape, one_minus, w, n, 0.0)?;

    let partial = tape.add(depth_term, grad_term)?;
    let total = tape.add(partial, normal_term)?;
    Ok(LossTerms {
        depth_term,
        grad_term,
        normal_term,
        total,
    })
}

fn require_positive(op: &'static str, what: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain(
            op,
            format!("{what} depth must be positive, found {v}"),
        ));
    }
    Ok(())
}

/// `(1/n) Σ d² - (Σ d)² / (2n²)` with `d = ln pred - ln gt`.
pub fn si_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("si_loss", pred, gt)?;
    require_positive("si_loss", "predicted", pred)?;
    require_positive("si_loss", "ground-truth", gt)?;
    let d: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| p.ln() - g.ln())
        .collect();
    let n = d.len() as f64;
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let s = pairwise_sum(&d);
    Ok(pairwise_sum(&sq) / n - s * s / (2.0 * n * n))
}

pub fn si_on(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let n = tape.value(pred).len() as f64;
    let lp = tape.ln(pred)?;
    let lg = tape.ln(gt)?;
    let d = tape.sub(lp, lg)?;
    let sq = tape.square(d)?;
    let first = tape.mean(sq)?;
    let s = tape.sum(d)?;
    let s2 = tape.square(s)?;
    let second = tape.scale(s2, 1.0 / (2.0 * n * n))?;
    tape.sub(first, second)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "abs_rel,rms,log10,delta1,delta2,delta3,rmse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.rms, self.log10, self.delta1, self.delta2, self.delta3, self.rmse
        )
    }

    /// Header line plus one data row, newline-terminated.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Depth metrics over pixels where `mask` is nonzero (all pixels when
/// `None`). The `δ_k` thresholds `1.25^k` are inclusive.
pub fn evaluate(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<MetricReport> {
    same_shape("evaluate", pred, gt)?;
    let (w, n) = validity(pred.shape(), mask)?;
    let mut abs_rel = Vec::with_capacity(n);
    let mut sq = Vec::with_capacity(n);
    let mut log10 = Vec::with_capacity(n);
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    for ((&p, &g), &v) in pred.data().iter().zip(gt.data()).zip(w.data()) {
        if v == 0.0 {
            continue;
        }
        if !(g > 0.0) {
            return Err(Error::domain(
                "evaluate",
                format!("ground-truth depth must be positive, found {g}"),
            ));
        }
        if !(p > 0.0) {
            return Err(Error::domain(
                "evaluate",
                format!("predicted depth must be positive, found {p}"),
            ));
        }
        abs_rel.push((p - g).abs() / g);
        sq.push((p - g) * (p - g));
        log10.push((p.log10() - g.log10()).abs());
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            // max(p/g, g/p) <= t without rounding the ratio
            if p <= t * g && g <= t * p {
                *hit += 1;
            }
        }
    }
    let nf = n as f64;
    let rms = (pairwise_sum(&sq) / nf).sqrt();
    Ok(MetricReport {
        abs_rel: pairwise_sum(&abs_rel) / nf,
        rms,
        log10: pairwise_sum(&log10) / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        rmse: rms,
    })
}

/// Root mean squared difference.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("rmse", a, b)?;
    let sq: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    Ok((pairwise_sum(&sq) / sq.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{directional, relative_error, STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct per-pixel loop with explicit neighbour clamping.
    fn composite_oracle(p: &Tensor, g: &Tensor) -> (f64, f64, f64) {
        let (h, w) = (p.shape()[0], p.shape()[1]);
        let at = |t: &Tensor, y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            t.get(&[y, x])
        };
        let e = |y, x| at(p, y, x) - at(g, y, x);
        let (mut d, mut gr, mut nm) = (0.0, 0.0, 0.0);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let f = |v: f64| (v.abs() + 0.5).ln();
                d += f(e(y, x));
                gr += f((e(y, x + 1) - e(y, x - 1)) / 2.0) + f((e(y + 1, x) - e(y - 1, x)) / 2.0);
                let n1 = [
                    -(at(p, y, x + 1) - at(p, y, x - 1)) / 2.0,
                    -(at(p, y + 1, x) - at(p, y - 1, x)) / 2.0,
                    1.0,
                ];
                let n2 = [
                    -(at(g, y, x + 1) - at(g, y, x - 1)) / 2.0,
                    -(at(g, y + 1, x) - at(g, y - 1, x)) / 2.0,
                    1.0,
                ];
                let dot: f64 = n1.iter().zip(&n2).map(|(a, b)| a * b).sum();
                let l1 = n1.iter().map(|a| a * a).sum::<f64>().sqrt();
                let l2 = n2.iter().map(|a| a * a).sum::<f64>().sqrt();
                nm += 1.0 - dot / (l1 * l2);
            }
        }
        let n = (h * w) as f64;
        (d / n, gr / n, nm / n)
    }

    #[test]
    fn perfect_prediction_hits_the_exact_minimum() {
        for (shape, seed) in [(vec![4, 4], 1), (vec![5, 7], 2), (vec![1, 6, 3], 3)] {
            let gt = random(&shape, 0.5, 5.0, seed);
            let b = composite_loss(&gt, &gt).unwrap();
            assert_eq!(b.depth_term, ln_half());
            assert_eq!(b.grad_term, 2.0 * ln_half());
            assert_eq!(b.normal_term, 0.0);
            assert_eq!(b.total, 3.0 * ln_half());
        }
    }

    #[test]
    fn half_unit_error_zeroes_the_depth_term() {
        let gt = random(&[4, 4], 1.0, 3.0, 4);
        let pred = gt.map(|v| v + 0.5);
        let b = composite_loss(&pred, &gt).unwrap();
        assert!(b.depth_term.abs() < 1e-15);
    }

    #[test]
    fn composite_matches_the_per_pixel_oracle() {
        for seed in 0..5 {
            let (p, g) = (
                random(&[4, 4], 0.5, 4.0, 10 + seed),
                random(&[4, 4], 0.5, 4.0, 20 + seed),
            );
            let b = composite_loss(&p, &g).unwrap();
            let (d, gr, nm) = composite_oracle(&p, &g);
            assert!((b.depth_term - d).abs() < 1e-12);
            assert!((b.grad_term - gr).abs() < 1e-12);
            assert!((b.normal_term - nm).abs() < 1e-12);
            assert!((b.total - (b.depth_term + b.grad_term + b.normal_term)).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_restricts_the_mean_to_valid_pixels() {
        let (p, g) = (random(&[4, 4], 0.5, 4.0, 30), random(&[4, 4], 0.5, 4.0, 31));
        let all = composite_loss_masked(&p, &g, Some(&Tensor::ones(&[4, 4]))).unwrap();
        assert!((all.total - composite_loss(&p, &g).unwrap().total).abs() < 1e-14);
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.set(&[1, 2], 1.0);
        let one = composite_loss_masked(&p, &g, Some(&mask)).unwrap();
        let e = p.get(&[1, 2]) - g.get(&[1, 2]);
        assert!((one.depth_term - (e.abs() + 0.5).ln()).abs() < 1e-15);
        assert!(composite_loss_masked(&p, &g, Some(&Tensor::zeros(&[4, 4]))).is_err());
    }

    #[test]
    fn tape_composite_agrees_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for seed in 0..5 {
            let (p, g) = (
                random(&[5, 5], 0.5, 4.0, 50 + seed),
                random(&[5, 5], 0.5, 4.0, 60 + seed),
            );
            let mut tape = Tape::new();
            let pv = tape.param(p.clone());
            let gv = tape.constant(g.clone());
            let terms = composite_on(&mut tape, pv, gv, None).unwrap();
            let b = composite_loss(&p, &g).unwrap();
            assert!((tape.value(terms.total).item().unwrap() - b.total).abs() < 1e-12);
            let (a, n) = directional(&mut tape, terms.total, &[pv], STEP, &mut rng).unwrap();
            assert!(relative_error(a, n) < 1e-5, "{a} vs {n}");
        }
        let gt = random(&[4, 4], 0.5, 4.0, 70);
        let mut tape = Tape::new();
        let (pv, gv) = (tape.param(gt.clone()), tape.constant(gt));
        let terms = composite_on(&mut tape, pv, gv, None).unwrap();
        assert_eq!(tape.value(terms.total).item().unwrap(), 3.0 * ln_half());
    }

    #[test]
    fn si_loss_identities() {
        let g = random(&[3, 5], 0.5, 4.0, 80);
        assert_eq!(si_loss(&g, &g).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((si_loss(&g.map(|v| v * e), &g).unwrap() - 0.5).abs() < 1e-12);
        let c: f64 = 0.3;
        assert!((si_loss(&g.map(|v| v * c.exp()), &g).unwrap() - c * c / 2.0).abs() < 1e-12);
        let p = random(&[3, 5], 0.5, 4.0, 81);
        let scaled = si_loss(&p.map(|v| 7.0 * v), &g.map(|v| 7.0 * v)).unwrap();
        assert!((scaled - si_loss(&p, &g).unwrap()).abs() < 1e-12);
        assert!(si_loss(&p.map(|v| v - 10.0), &g).is_err());
    }

    #[test]
    fn si_loss_matches_loop_oracle_and_tape() {
        let (p, g) = (random(&[4, 6], 0.5, 4.0, 90), random(&[4, 6], 0.5, 4.0, 91));
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..p.len() {
            let d = p.data()[i].ln() - g.data()[i].ln();
            s += d;
            s2 += d * d;
        }
        let n = p.len() as f64;
        let oracle = s2 / n - s * s / (2.0 * n * n);
        assert!((si_loss(&p, &g).unwrap() - oracle).abs() < 1e-13);
        let mut tape = Tape::new();
        let (pv, gv) = (tape.param(p), tape.constant(g));
        let l = si_on(&mut tape, pv, gv).unwrap();
        assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-13);
        let (a, num) = directional(
            &mut tape,
            l,
            &[pv],
            STEP,
            &mut ChaCha8Rng::seed_from_u64(92),
        )
        .unwrap();
        assert!(relative_error(a, num) < 1e-5);
    }

    #[test]
    fn evaluate_identity_and_inclusive_threshold() {
        let g = random(&[6, 6], 0.2, 8.0, 100);
        let r = evaluate(&g, &g, None).unwrap();
        assert_eq!((r.abs_rel, r.rms, r.log10, r.delta1), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(r.csv_row(), "0,0,0,1,1,1,0");
        let r = evaluate(&g.map(|v| 1.25 * v), &g, None).unwrap();
        assert!((r.abs_rel - 0.25).abs() < 1e-15);
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn evaluate_matches_loop_oracle() {
        let (p, g) = (
            random(&[5, 5], 0.2, 8.0, 101),
            random(&[5, 5], 0.2, 8.0, 102),
        );
        let r = evaluate(&p, &g, None).unwrap();
        let n = p.len() as f64;
        let (mut ar, mut sq, mut lg, mut d) = (0.0, 0.0, 0.0, [0.0; 3]);
        for (&a, &b) in p.data().iter().zip(g.data()) {
            ar += (a - b).abs() / b;
            sq += (a - b).powi(2);
            lg += (a.log10() - b.log10()).abs();
            let ratio = (a / b).max(b / a);
            for (k, dk) in d.iter_mut().enumerate() {
                if ratio <= 1.25f64.powi(k as i32 + 1) {
                    *dk += 1.0;
                }
            }
        }
        assert!((r.abs_rel - ar / n).abs() < 1e-13);
        assert!((r.rms - (sq / n).sqrt()).abs() < 1e-13);
        assert!((r.log10 - lg / n).abs() < 1e-13);
        assert_eq!(
            [r.delta1, r.delta2, r.delta3],
            [d[0] / n, d[1] / n, d[2] / n]
        );
        assert_eq!(r.rmse, r.rms);
        assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let g = Tensor::full(&[2, 2], 1.0);
        assert!(evaluate(&g, &g, Some(&Tensor::zeros(&[2, 2]))).is_err());
        assert!(evaluate(&g, &Tensor::full(&[2, 2], 0.0), None).is_err());
        assert!(evaluate(&g, &Tensor::full(&[2, 3], 1.0), None).is_err());
        let mut gt = g.clone();
        gt.set(&[0, 0], 0.0);
        let mut mask = Tensor::ones(&[2, 2]);
        mask.set(&[0, 0], 0.0);
        assert_eq!(evaluate(&g, &gt, Some(&mask)).unwrap().delta1, 1.0);
    }
}
