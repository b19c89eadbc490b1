//! Loss ablation on generated scenes: the same toy predictor trained with
//! MSE, with the OT depth loss, and with their combination.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{evaluate, MetricReport};
use crate::ot::{
    combined_on, exact_1d, mse_on, normalize, BinGrid, OtSolver, OtdlConfig, OtdlTerm,
    SinkhornConfig,
};
use crate::predictor::{fit, CnnToy, Predictor};
use crate::scene::{generate_set, Scene, SceneConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Otdl,
    Both,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Otdl, LossKind::Both];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Otdl => "otdl",
            LossKind::Both => "both",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "otdl" => Ok(LossKind::Otdl),
            "both" => Ok(LossKind::Both),
            other => Err(Error::invalid(format!(
                "unknown loss {other:?}; expected mse, otdl or both"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub with_dgr: bool,
    pub lambda: f64,
    pub lr: f64,
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    /// Soft-binned settings for the differentiable OT term. The default
    /// grid matches the one used to report `ot_distance`.
    pub otdl: OtdlConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            with_dgr: false,
            lambda: 1.0,
            lr: 0.01,
            scenes: 4,
            seed: 42,
            scene: SceneConfig::default(),
            otdl: OtdlConfig {
                grid: BinGrid::default(),
                softness: 1.0,
                solver: OtSolver::Sinkhorn(SinkhornConfig::default()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainRow {
    pub loss: LossKind,
    /// Training loss before each step and after the last.
    pub curve: Vec<f64>,
    pub metrics: MetricReport,
    /// Exact OT cost between hard histograms (default grid) of predicted
    /// and true depth, pooled over the training scenes.
    pub ot_distance: f64,
}

impl ToyTrainRow {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.curve.last().expect("curve is never empty")
    }
}

pub const METRICS_HEADER: &str =
    "loss,abs_rel,rms,log10,delta1,delta2,delta3,rmse,ot_distance,initial_loss,final_loss";
pub const CURVE_HEADER: &str = "loss,step,value";

pub fn metrics_csv(rows: &[ToyTrainRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.loss,
            r.metrics.csv_row(),
            r.ot_distance,
            r.initial_loss(),
            r.final_loss()
        ));
    }
    out
}

pub fn curve_csv(rows: &[ToyTrainRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        for (step, v) in r.curve.iter().enumerate() {
            out.push_str(&format!("{},{step},{v}\n", r.loss));
        }
    }
    out
}

fn flatten<'a>(maps: impl Iterator<Item = &'a Tensor>) -> Tensor {
    Tensor::from_vec(maps.flat_map(|t| t.data().iter().copied()).collect())
}

fn train_one(kind: LossKind, cfg: &ToyTrainConfig, scenes: &[Scene]) -> Result<ToyTrainRow> {
    let mut model = CnnToy::new(cfg.seed, cfg.with_dgr)?;
    let otdl = cfg.otdl;
    let lambda = cfg.lambda;
    let curve = fit(
        &mut model,
        scenes,
        cfg.steps,
        cfg.lr,
        |tape, y, s| match kind {
            LossKind::Mse => {
                let gt = tape.constant(s.depth.clone());
                mse_on(tape, y, gt)
            }
            LossKind::Otdl => tape.map(y, Arc::new(OtdlTerm::new(&s.depth, &otdl)?)),
            LossKind::Both => combined_on(tape, y, &s.depth, lambda, &otdl),
        },
    )?;
    let preds: Vec<Tensor> = scenes
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<_>>()?;
    let pred = flatten(preds.iter());
    let gt = flatten(scenes.iter().map(|s| &s.depth));
    let metrics = evaluate(&pred, &gt, None)?;
    let grid = BinGrid::default();
    let ot_distance = exact_1d(&normalize(&pred, &grid, 0.0)?, &normalize(&gt, &grid, 0.0)?)?.cost;
    Ok(ToyTrainRow {
        loss: kind,
        curve,
        metrics,
        ot_distance,
    })
}

/// One training run per loss kind, from identical initial weights on
/// identical scenes; runs execute in parallel.
pub fn run(cfg: &ToyTrainConfig, kinds: &[LossKind]) -> Result<Vec<ToyTrainRow>> {
    if kinds.is_empty() {
        return Err(Error::invalid("no loss selected"));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_otdl must be >= 0, got {}",
            cfg.lambda
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scenes = generate_set(&cfg.scene, cfg.scenes, &mut rng)?;
    kinds
        .par_iter()
        .map(|&k| train_one(k, cfg, &scenes))
        .collect()
}
