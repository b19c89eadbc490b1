//! Sparse-pixel masks: find a small set of pixels from which a frozen
//! predictor still reproduces its full-image depth map.
//!
//! A mask network `G` (three 3x3 convolutions, 3 -> 8 -> 8 -> 1, sigmoid
//! output) or a free per-pixel logit map produces `m in (0,1)`. The
//! objective is `L_dif(N(I * m), N(I)) + lambda * mean(m)` with `L_dif` the
//! composite depth loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{composite_loss, composite_on, rmse};
use crate::ops::Pad;
use crate::optim::gd_step;
use crate::predictor::{ParamSet, Predictor};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial output bias: masks start near `sigmoid(3) = 0.95`, i.e. keep
/// almost everything.
pub const INITIAL_LOGIT: f64 = 3.0;
const HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// Mask predicted from the image by a small network.
    #[default]
    Network,
    /// One free logit per pixel.
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub mode: MaskMode,
    pub params: ParamSet,
    pub lambda: f64,
    pub threshold: f64,
}

impl MaskState {
    pub fn new(
        mode: MaskMode,
        height: usize,
        width: usize,
        lambda: f64,
        threshold: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        check_threshold(threshold)?;
        let mut params = ParamSet::default();
        match mode {
            MaskMode::Network => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut init = |shape: &[usize], fan_in: usize| {
                    let r = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(shape, -r, r, &mut rng)
                };
                params.push("g1.w", init(&[HIDDEN, 3, 3, 3], 27));
                params.push("g1.b", Tensor::zeros(&[HIDDEN]));
                params.push("g2.w", init(&[HIDDEN, HIDDEN, 3, 3], 9 * HIDDEN));
                params.push("g2.b", Tensor::zeros(&[HIDDEN]));
                params.push("g3.w", init(&[1, HIDDEN, 3, 3], 9 * HIDDEN));
                params.push("g3.b", Tensor::full(&[1], INITIAL_LOGIT));
            }
            MaskMode::Free => {
                params.push("logits", Tensor::full(&[1, height, width], INITIAL_LOGIT))
            }
        }
        Ok(Self {
            mode,
            params,
            lambda,
            threshold,
        })
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0,1), got {t}"
        )));
    }
    Ok(())
}

/// Raw mask `[1, H, W]` on the tape.
pub fn mask_on(tape: &mut Tape, mode: MaskMode, p: &[Var], image: Var) -> Result<Var> {
    let logits = match mode {
        MaskMode::Network => {
            let x = tape.conv2d(image, p[0], Some(p[1]), Pad::Replicate)?;
            let x = tape.relu(x)?;
            let x = tape.conv2d(x, p[2], Some(p[3]), Pad::Replicate)?;
            let x = tape.relu(x)?;
            tape.conv2d(x, p[4], Some(p[5]), Pad::Replicate)?
        }
        MaskMode::Free => p[0],
    };
    tape.sigmoid(logits)
}

pub fn raw_mask(state: &MaskState, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = state.params.register(&mut tape, false);
    let x = tape.constant(image.clone());
    let m = mask_on(&mut tape, state.mode, &p, x)?;
    Ok(tape.value(m).clone())
}

/// Tape for the objective with trainable mask parameters and a frozen
/// predictor.
struct Objective {
    tape: Tape,
    params: Vec<Var>,
    value: Var,
}

/// Records `L_dif(N(I * G(I)), Y) + lambda * mean(G(I))` on `tape` with the
/// mask parameters `params` and a frozen predictor.
pub fn objective_on(
    tape: &mut Tape,
    state: &MaskState,
    params: &[Var],
    predictor: &dyn Predictor,
    image: &Tensor,
    full: &Tensor,
) -> Result<Var> {
    let (c, h, w) = image.chw()?;
    if c != 3 || full.shape() != [h, w] {
        return Err(Error::shape(
            "mask_objective",
            format!(
                "image {:?} with reference {:?}",
                image.shape(),
                full.shape()
            ),
        ));
    }
    if state.mode == MaskMode::Free && state.params.named()[0].1.shape() != [1, h, w] {
        return Err(Error::shape(
            "mask_objective",
            "free mask does not match the image size",
        ));
    }
    let frozen = predictor.params().register(tape, false);
    let x = tape.constant(image.clone());
    let y = tape.constant(full.clone());
    let m = mask_on(tape, state.mode, params, x)?;
    let m3 = tape.concat_channels(&[m, m, m])?;
    let masked = tape.mul(x, m3)?;
    let pred = predictor.forward_on(tape, &frozen, masked)?;
    let dif = composite_on(tape, pred, y, None)?.total;
    let l1 = tape.mean(m)?;
    let l1 = tape.scale(l1, state.lambda)?;
    tape.add(dif, l1)
}

fn build_objective(
    state: &MaskState,
    predictor: &dyn Predictor,
    image: &Tensor,
    full: &Tensor,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let params = state.params.register(&mut tape, true);
    let value = objective_on(&mut tape, state, &params, predictor, image, full)?;
    Ok(Objective {
        tape,
        params,
        value,
    })
}

/// `L_dif(N(I * G(I)), Y) + lambda * mean(G(I))`.
pub fn mask_objective(
    state: &MaskState,
    predictor: &dyn Predictor,
    image: &Tensor,
    full: &Tensor,
) -> Result<f64> {
    let obj = build_objective(state, predictor, image, full)?;
    obj.tape.value(obj.value).item()
}

/// The two objective terms for an explicit mask `[1,H,W]` or `[H,W]`:
/// `(L_dif, mean(mask))`.
pub fn objective_terms(
    predictor: &dyn Predictor,
    image: &Tensor,
    full: &Tensor,
    mask: &Tensor,
) -> Result<(f64, f64)> {
    let masked = apply_mask(image, mask)?;
    let pred = predictor.predict(&masked)?;
    Ok((composite_loss(&pred, full)?.total, mask.mean()))
}

/// `image * mask`, with the mask shared by all channels.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let (mc, mh, mw) = mask.chw()?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::shape(
            "apply_mask",
            format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
        ));
    }
    let m = mask.data();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m[i % (h * w)])
        .collect();
    Tensor::new(vec![c, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRun {
    /// Parameters with the lowest recorded objective.
    pub best: MaskState,
    pub best_objective: f64,
    pub initial_objective: f64,
    /// Objective before each step.
    pub trace: Vec<f64>,
}

/// Plain gradient descent on the mask parameters with a fixed step; the
/// predictor stays frozen. Deterministic.
pub fn optimize_mask(
    state: &MaskState,
    predictor: &dyn Predictor,
    image: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<MaskRun> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let full = predictor.predict(image)?;
    let mut obj = build_objective(state, predictor, image, &full)?;
    let mut values = state.params.tensors();
    let initial = obj.tape.value(obj.value).item()?;
    let (mut best_value, mut best_params) = (initial, values.clone());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            let leaves: Vec<(Var, Tensor)> = obj
                .params
                .iter()
                .copied()
                .zip(values.iter().cloned())
                .collect();
            obj.tape.replay(&leaves).map_err(|e| match e {
                Error::Domain { .. } => Error::Diverged { step },
                other => other,
            })?;
        }
        let v = obj.tape.value(obj.value).item()?;
        if !v.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(v);
        if v < best_value {
            best_value = v;
            best_params = values.clone();
        }
        if step == steps {
            break;
        }
        let grads = obj.tape.backward(obj.value)?;
        let g: Vec<Tensor> = obj
            .params
            .iter()
            .zip(&values)
            .map(|(&p, t)| grads.of_or_zeros(p, t.shape()).0)
            .collect();
        gd_step(&mut values, &g, lr)?;
    }
    let mut best = state.clone();
    best.params.set_tensors(best_params)?;
    Ok(MaskRun {
        best,
        best_objective: best_value,
        initial_objective: initial,
        trace,
    })
}

/// 1 where `mask >= threshold`, else 0.
pub fn binarize(mask: &Tensor, threshold: f64) -> Result<Tensor> {
    check_threshold(threshold)?;
    if let Some(v) = mask.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::domain(
            "binarize",
            format!("mask values must lie in [0,1], found {v}"),
        ));
    }
    Ok(mask.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

fn require_binary(op: &'static str, mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::domain(op, format!("mask must be binary, found {v}")));
    }
    Ok(())
}

/// Fraction of retained pixels.
pub fn sparseness(binary: &Tensor) -> Result<f64> {
    require_binary("sparseness", binary)?;
    if binary.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    Ok(binary.mean())
}

/// RMSE between `N_a(I * mask_b)` and `reference`.
pub fn cross_evaluate(
    predictor: &dyn Predictor,
    mask: &Tensor,
    image: &Tensor,
    reference: &Tensor,
) -> Result<f64> {
    require_binary("cross_evaluate", mask)?;
    let pred = predictor.predict(&apply_mask(image, mask)?)?;
    rmse(&pred, reference)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityReport {
    pub lambda: f64,
    pub sparseness: f64,
    pub rmse_vs_full: f64,
    pub rmse_vs_gt: Option<f64>,
}

impl SparsityReport {
    pub const CSV_HEADER: &'static str = "lambda,sparseness,rmse_vs_full,rmse_vs_gt";

    pub fn csv_row(&self) -> String {
        let gt = self.rmse_vs_gt.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{gt}",
            self.lambda, self.sparseness, self.rmse_vs_full
        )
    }
}

pub fn sweep_csv(rows: &[SparsityReport]) -> String {
    let mut out = format!("{}\n", SparsityReport::CSV_HEADER);
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepConfig {
    pub mode: MaskMode,
    pub steps: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::for_mode(MaskMode::Network)
    }
}

impl SweepConfig {
    /// Defaults per mode. A free logit only receives its own pixel's share
    /// of the mean, so free masks need a step larger by roughly the pixel
    /// count.
    pub fn for_mode(mode: MaskMode) -> Self {
        Self {
            mode,
            steps: 300,
            lr: match mode {
                MaskMode::Network => 0.5,
                MaskMode::Free => 300.0,
            },
            threshold: 0.5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub report: SparsityReport,
    pub raw: Tensor,
    pub binary: Tensor,
}

/// One optimize, binarize and evaluate pass per `lambda`, rows in
/// parallel. Every row starts from the same seeded initial state.
pub fn lambda_sweep(
    predictor: &dyn Predictor,
    image: &Tensor,
    gt: Option<&Tensor>,
    lambdas: &[f64],
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("lambdas must be nonnegative"));
    }
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("lambdas must be in ascending order"));
    }
    let (_, h, w) = image.chw()?;
    let full = predictor.predict(image)?;
    lambdas
        .par_iter()
        .map(|&lambda| {
            let state = MaskState::new(cfg.mode, h, w, lambda, cfg.threshold, cfg.seed)?;
            let run = optimize_mask(&state, predictor, image, cfg.steps, cfg.lr)?;
            let raw = raw_mask(&run.best, image)?;
            let binary = binarize(&raw, cfg.threshold)?;
            let rmse_vs_full = cross_evaluate(predictor, &binary, image, &full)?;
            let rmse_vs_gt = gt
                .map(|g| cross_evaluate(predictor, &binary, image, g))
                .transpose()?;
            Ok(SweepRow {
                report: SparsityReport {
                    lambda,
                    sparseness: sparseness(&binary)?,
                    rmse_vs_full,
                    rmse_vs_gt,
                },
                raw,
                binary,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{directional, relative_error, STEP};
    use crate::losses::ln_half;
    use crate::predictor::CnnToy;
    use crate::scene::{generate, SceneConfig};

    fn setup() -> (CnnToy, Tensor) {
        let cfg = SceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let s = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (CnnToy::new(3, false).unwrap(), s.image)
    }

    #[test]
    fn binarize_and_sparseness_examples() {
        let m = Tensor::from_vec(vec![0.2, 0.7]);
        assert_eq!(binarize(&m, 0.5).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(
            binarize(&Tensor::from_vec(vec![0.1, 0.3]), 0.5)
                .unwrap()
                .data(),
            &[0.0, 0.0]
        );
        let b = binarize(&m, 0.5).unwrap();
        assert_eq!(binarize(&b, 0.5).unwrap(), b);
        assert_eq!(
            binarize(&Tensor::from_vec(vec![0.5]), 0.5).unwrap().data(),
            &[1.0]
        );
        assert!(binarize(&m, 0.0).is_err() && binarize(&m, 1.0).is_err());
        assert_eq!(sparseness(&Tensor::ones(&[4, 4])).unwrap(), 1.0);
        assert_eq!(sparseness(&Tensor::zeros(&[4, 4])).unwrap(), 0.0);
        assert_eq!(
            sparseness(&Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0])).unwrap(),
            0.5
        );
        assert!(sparseness(&m).is_err());
    }

    #[test]
    fn all_ones_mask_sits_at_the_self_identity_minimum() {
        let (p, image) = setup();
        let full = p.predict(&image).unwrap();
        let (dif, l1) = objective_terms(&p, &image, &full, &Tensor::ones(&[1, 16, 16])).unwrap();
        assert_eq!(dif, 3.0 * ln_half());
        assert_eq!(l1, 1.0);
        assert_eq!(
            cross_evaluate(&p, &Tensor::ones(&[1, 16, 16]), &image, &full).unwrap(),
            0.0
        );
    }

    #[test]
    fn objective_composes_its_terms() {
        let (p, image) = setup();
        let full = p.predict(&image).unwrap();
        for lambda in [0.0, 2.5] {
            let state = MaskState::new(MaskMode::Network, 16, 16, lambda, 0.5, 7).unwrap();
            let m = raw_mask(&state, &image).unwrap();
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let (dif, l1) = objective_terms(&p, &image, &full, &m).unwrap();
            let got = mask_objective(&state, &p, &image, &full).unwrap();
            assert!(
                (got - (dif + lambda * l1)).abs() < 1e-12,
                "{got} vs {}",
                dif + lambda * l1
            );
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (p, image) = setup();
        let full = p.predict(&image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [MaskMode::Network, MaskMode::Free] {
            let state = MaskState::new(mode, 16, 16, 1.5, 0.5, 9).unwrap();
            let mut obj = build_objective(&state, &p, &image, &full).unwrap();
            let params = obj.params.clone();
            let (a, n) = directional(&mut obj.tape, obj.value, &params, STEP, &mut rng).unwrap();
            assert!(relative_error(a, n) < 1e-5, "{mode:?}: {a} vs {n}");
        }
    }

    #[test]
    fn optimization_is_deterministic_and_keeps_the_best() {
        let (p, image) = setup();
        let state = MaskState::new(MaskMode::Network, 16, 16, 2.0, 0.5, 11).unwrap();
        let zero = optimize_mask(&state, &p, &image, 0, 0.5).unwrap();
        assert_eq!(zero.best, state);
        let a = optimize_mask(&state, &p, &image, 40, 0.5).unwrap();
        let b = optimize_mask(&state, &p, &image, 40, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.best_objective < a.initial_objective);
        assert_eq!(
            a.best_objective,
            a.trace.iter().copied().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn sweep_rejects_bad_lambdas_and_repeats_duplicates() {
        let (p, image) = setup();
        let cfg = SweepConfig {
            steps: 10,
            ..Default::default()
        };
        assert!(lambda_sweep(&p, &image, None, &[2.0, 1.0], &cfg).is_err());
        assert!(lambda_sweep(&p, &image, None, &[-1.0], &cfg).is_err());
        let rows = lambda_sweep(&p, &image, None, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(rows[0].report.csv_row().ends_with(','));
    }
}
