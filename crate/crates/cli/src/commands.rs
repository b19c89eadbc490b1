use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use otdepth_core::audit::{self, Scope};
use otdepth_core::io::{
    load_params, read_dten, save_params, write_atomic, write_dten, write_pgm, MANIFEST,
};
use otdepth_core::losses::evaluate;
use otdepth_core::mask::{lambda_sweep, sweep_csv, MaskMode, SweepConfig};
use otdepth_core::ot::{otdl_solution, BinGrid, Epsilon, OtSolver, OtdlConfig, SinkhornConfig};
use otdepth_core::predictor::{pretrain, AttnToy, CnnToy, Predictor, PretrainConfig};
use otdepth_core::scene::{held_out, SceneConfig};
use otdepth_core::toytrain::{self, LossKind, ToyTrainConfig};
use otdepth_core::Tensor;

use crate::config::FileConfig;
use crate::{Common, EvalArgs, GradcheckArgs, MasksweepArgs, OtdlArgs, ToytrainArgs};

const DEFAULT_OUT: &str = "otdepth-out";
const DEFAULT_SEED: u64 = 42;

/// Comma-separated list usable both as a flag and as a config value.
#[derive(Clone, Debug, PartialEq)]
struct List<T>(Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|item| {
                item.trim()
                    .parse::<T>()
                    .map_err(|e| format!("{item:?}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

fn parse_flag<T: FromStr>(flag: Option<String>, what: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    flag.map(|s| {
        s.parse::<T>()
            .map_err(|e| anyhow::anyhow!("bad --{what} {s:?}: {e}"))
    })
    .transpose()
}

/// Resolved shared settings plus the remaining config keys.
struct Run {
    command: &'static str,
    seed: u64,
    out: Option<PathBuf>,
    cfg: FileConfig,
    /// Resolved settings, written back as a reusable config file.
    echo: String,
}

impl Run {
    fn new(common: &Common, command: &'static str) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let seed = cfg.resolve("seed", common.seed, DEFAULT_SEED)?;
        let out = common.out.clone().or(cfg.take::<PathBuf>("out")?);
        eprintln!("{command}: seed = {seed}");
        Ok(Self {
            command,
            seed,
            out,
            cfg,
            echo: format!("seed = {seed}\n"),
        })
    }

    fn record(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.echo, "{key} = {value}");
    }

    /// Output directory, created on demand.
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Rejects unused config keys, then writes `<command>.run`.
    fn finish(self, dir: Option<&Path>) -> Result<()> {
        self.cfg.finish(self.command)?;
        if let Some(dir) = dir {
            write_atomic(
                dir.join(format!("{}.run", self.command)),
                self.echo.as_bytes(),
            )?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_map(dir: &Path, stem: &str, t: &Tensor) -> Result<()> {
    write_dten(dir.join(format!("{stem}.dten")), t)?;
    write_pgm(dir.join(format!("{stem}.pgm")), t)?;
    Ok(())
}

fn read_map(path: &Path) -> Result<Tensor> {
    read_dten(path).with_context(|| format!("reading {}", path.display()))
}

pub fn gradcheck(common: &Common, a: GradcheckArgs) -> Result<ExitCode> {
    let mut run = Run::new(common, "gradcheck")?;
    let scope: Scope = run
        .cfg
        .resolve("scope", parse_flag(a.scope, "scope")?, Scope::All)?;
    run.record("scope", scope);
    let dir = run.out_dir()?;
    let report = audit::run(scope, run.seed)?;
    write_text(
        &dir.join(format!("gradcheck_{scope}.csv")),
        &report.to_csv(),
    )?;
    run.finish(Some(&dir))?;
    let failures = report.failures();
    eprintln!(
        "gradcheck {scope}: {} checks, {} failures",
        report.rows.len(),
        failures.len()
    );
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in failures {
        eprintln!(
            "FAIL {}: analytic {:e}, numeric {:e}, rel_err {:e} (tolerance {:e})",
            f.check.name, f.check.analytic, f.check.numeric, f.check.rel_err, f.tolerance
        );
    }
    Ok(ExitCode::FAILURE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SolverName {
    Exact1d,
    Sinkhorn,
    Lp,
}

impl FromStr for SolverName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact1d" => Ok(Self::Exact1d),
            "sinkhorn" => Ok(Self::Sinkhorn),
            "lp" => Ok(Self::Lp),
            _ => Err("expected exact1d, sinkhorn or lp".into()),
        }
    }
}

pub fn otdl(common: &Common, a: OtdlArgs) -> Result<ExitCode> {
    let mut run = Run::new(common, "otdl")?;
    let grid0 = BinGrid::default();
    let solver = run.cfg.resolve(
        "solver",
        parse_flag(a.solver, "solver")?,
        SolverName::Exact1d,
    )?;
    let bins = run.cfg.resolve("bins", a.bins, grid0.bins)?;
    let d_min = run.cfg.resolve("d_min", a.d_min, grid0.d_min)?;
    let d_max = run.cfg.resolve("d_max", a.d_max, grid0.d_max)?;
    let softness = run.cfg.resolve("softness", a.softness, 0.0)?;
    let epsilon = run.cfg.resolve("epsilon", a.epsilon, 1e-2)?;
    for (k, v) in [
        ("bins", bins as f64),
        ("d_min", d_min),
        ("d_max", d_max),
        ("softness", softness),
        ("epsilon", epsilon),
    ] {
        run.record(k, v);
    }
    let solver = match solver {
        SolverName::Exact1d => OtSolver::Exact1d,
        SolverName::Lp => OtSolver::Lp,
        SolverName::Sinkhorn => {
            OtSolver::Sinkhorn(SinkhornConfig::with_epsilon(Epsilon::Relative(epsilon)))
        }
    };
    let cfg = OtdlConfig {
        grid: BinGrid::new(d_min, d_max, bins)?,
        softness,
        solver,
    };
    let pred = read_map(&a.pred)?;
    let gt = read_map(&a.gt)?;
    let sol = otdl_solution(&pred, &gt, &cfg)?;
    if let Some(path) = &a.plan {
        write_dten(path, &sol.plan.to_tensor())
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    println!("{:?}", sol.cost);
    let dir = run.out.is_some().then(|| run.out_dir()).transpose()?;
    run.finish(dir.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub fn toytrain(common: &Common, a: ToytrainArgs) -> Result<ExitCode> {
    let mut run = Run::new(common, "toytrain")?;
    let d = ToyTrainConfig::default();
    let losses = run
        .cfg
        .resolve(
            "loss",
            parse_flag(a.loss, "loss")?,
            List(LossKind::ALL.to_vec()),
        )?
        .0;
    let cfg = ToyTrainConfig {
        steps: run.cfg.resolve("steps", a.steps, d.steps)?,
        with_dgr: run.cfg.switch("with_dgr", a.with_dgr)?,
        lambda: run.cfg.resolve("lambda_otdl", a.lambda_otdl, d.lambda)?,
        lr: run.cfg.resolve("lr", a.lr, d.lr)?,
        scenes: run.cfg.resolve("scenes", a.scenes, d.scenes)?,
        seed: run.seed,
        ..d
    };
    let names: Vec<&str> = losses.iter().map(|k| k.as_str()).collect();
    run.record("loss", names.join(","));
    run.record("steps", cfg.steps);
    run.record("with_dgr", cfg.with_dgr);
    run.record("lambda_otdl", cfg.lambda);
    run.record("lr", cfg.lr);
    run.record("scenes", cfg.scenes);
    let dir = run.out_dir()?;
    let rows = toytrain::run(&cfg, &losses)?;
    for r in &rows {
        eprintln!(
            "{}: loss {:.6} -> {:.6}, ot_distance {:.6}, rmse {:.6}",
            r.loss,
            r.initial_loss(),
            r.final_loss(),
            r.ot_distance,
            r.metrics.rmse
        );
    }
    write_text(
        &dir.join("toytrain_metrics.csv"),
        &toytrain::metrics_csv(&rows),
    )?;
    write_text(&dir.join("toytrain_curve.csv"), &toytrain::curve_csv(&rows))?;
    run.finish(Some(&dir))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PredictorName {
    CnnToy,
    AttnToy,
}

impl FromStr for PredictorName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cnn_toy" => Ok(Self::CnnToy),
            "attn_toy" => Ok(Self::AttnToy),
            _ => Err("expected cnn_toy or attn_toy".into()),
        }
    }
}

/// Loads the pretrained predictor from `dir`, or pretrains and saves it.
fn pretrained(
    name: PredictorName,
    seed: u64,
    scene: &SceneConfig,
    dir: &Path,
) -> Result<Box<dyn Predictor>> {
    let mut p: Box<dyn Predictor> = match name {
        PredictorName::CnnToy => Box::new(CnnToy::new(seed, false)?),
        PredictorName::AttnToy => Box::new(AttnToy::new(seed, scene.height, scene.width)?),
    };
    if dir.join(MANIFEST).exists() {
        p.params_mut()
            .load_named(load_params(dir)?)
            .with_context(|| format!("loading checkpoint {}", dir.display()))?;
        eprintln!("loaded {} from {}", p.label(), dir.display());
    } else {
        let cfg = PretrainConfig {
            scene: *scene,
            ..Default::default()
        };
        let curve = pretrain(p.as_mut(), &cfg, seed)?;
        eprintln!(
            "pretrained {}: mse {:.4} -> {:.4}",
            p.label(),
            curve[0],
            curve.last().expect("non-empty curve")
        );
        save_params(dir, p.params().named())?;
        eprintln!("saved {}", dir.display());
    }
    Ok(p)
}

pub fn masksweep(common: &Common, a: MasksweepArgs) -> Result<ExitCode> {
    let mut run = Run::new(common, "masksweep")?;
    let name = run.cfg.resolve(
        "predictor",
        parse_flag(a.predictor, "predictor")?,
        PredictorName::CnnToy,
    )?;
    let lambdas = run
        .cfg
        .resolve(
            "lambdas",
            parse_flag(a.lambdas, "lambdas")?,
            List(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        )?
        .0;
    let mode = if run.cfg.switch("free_mask", a.free_mask)? {
        MaskMode::Free
    } else {
        MaskMode::Network
    };
    let d = SweepConfig::for_mode(mode);
    let cfg = SweepConfig {
        mode,
        steps: run.cfg.resolve("steps", a.steps, d.steps)?,
        lr: run.cfg.resolve("lr", a.lr, d.lr)?,
        threshold: run.cfg.resolve("threshold", a.threshold, d.threshold)?,
        seed: run.seed,
    };
    let dir = run.out_dir()?;
    let root = match a.checkpoints {
        Some(p) => p,
        None => run
            .cfg
            .take::<PathBuf>("checkpoints")?
            .unwrap_or_else(|| dir.join("checkpoints")),
    };
    let label = match name {
        PredictorName::CnnToy => "cnn_toy",
        PredictorName::AttnToy => "attn_toy",
    };
    let lambda_list: Vec<String> = lambdas.iter().map(|l| l.to_string()).collect();
    run.record("predictor", label);
    run.record("lambdas", lambda_list.join(","));
    run.record("free_mask", mode == MaskMode::Free);
    run.record("steps", cfg.steps);
    run.record("lr", cfg.lr);
    run.record("threshold", cfg.threshold);
    ensure!(!lambdas.is_empty(), "no lambdas given");

    let scene_cfg = SceneConfig::default();
    let predictor = pretrained(
        name,
        run.seed,
        &scene_cfg,
        &root.join(format!("{label}-seed{}", run.seed)),
    )?;
    let scene = held_out(&scene_cfg, run.seed)?;
    let rows = lambda_sweep(
        predictor.as_ref(),
        &scene.image,
        Some(&scene.depth),
        &lambdas,
        &cfg,
    )?;

    let stem = match mode {
        MaskMode::Network => format!("masksweep_{label}"),
        MaskMode::Free => format!("masksweep_{label}_free"),
    };
    let maps = dir.join(&stem);
    fs::create_dir_all(&maps)?;
    write_map(&maps, "depth_gt", &scene.depth)?;
    write_map(&maps, "depth_full", &predictor.predict(&scene.image)?)?;
    for r in &rows {
        let l = r.report.lambda;
        eprintln!(
            "lambda {l}: sparseness {:.4}, rmse_vs_full {:.4}",
            r.report.sparseness, r.report.rmse_vs_full
        );
        write_map(&maps, &format!("mask_lambda{l}"), &r.raw)?;
        write_map(&maps, &format!("binary_lambda{l}"), &r.binary)?;
        let masked = otdepth_core::mask::apply_mask(&scene.image, &r.binary)?;
        write_map(
            &maps,
            &format!("depth_lambda{l}"),
            &predictor.predict(&masked)?,
        )?;
    }
    eprintln!("wrote maps under {}", maps.display());
    let reports: Vec<_> = rows.into_iter().map(|r| r.report).collect();
    write_text(&dir.join(format!("{stem}.csv")), &sweep_csv(&reports))?;
    run.finish(Some(&dir))?;
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, a: EvalArgs) -> Result<ExitCode> {
    let run = Run::new(common, "eval")?;
    let pred = read_map(&a.pred)?;
    let gt = read_map(&a.gt)?;
    let mask = a.mask.as_deref().map(read_map).transpose()?;
    if pred.shape() != gt.shape() {
        bail!(
            "shape mismatch: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        );
    }
    let csv = evaluate(&pred, &gt, mask.as_ref())?.to_csv();
    print!("{csv}");
    let dir = run.out.is_some().then(|| run.out_dir()).transpose()?;
    if let Some(dir) = &dir {
        write_text(&dir.join("eval.csv"), &csv)?;
    }
    run.finish(dir.as_deref())?;
    Ok(ExitCode::SUCCESS)
}
