//! Small differentiable depth predictors and a generic training loop.
//!
//! Two toys stand in for large pretrained networks: a convolution stack
//! (optionally followed by a DGR block) and a single-head attention block
//! over 8x8 patches. Both map a `[3, H, W]` image to a `[H, W]` depth map
//! squashed into `[d_lo, d_hi]`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dgr::{self, DgrConfig, DgrParams, DgrVars};
use crate::error::{Error, Result};
use crate::ops::Pad;
use crate::optim::Adam;
use crate::ot::mse_on;
use crate::scene::{generate_set, Scene, SceneConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output depth range of the toy predictors.
pub const DEPTH_LO: f64 = 0.5;
pub const DEPTH_HI: f64 = 10.0;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in self.entries.iter_mut().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: {:?} vs {:?}", old.shape(), new.shape()),
                ));
            }
            *old = new;
        }
        Ok(())
    }

    /// Loads tensors by name, e.g. from a parameter directory.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let mut ordered = Vec::with_capacity(self.entries.len());
        for (name, _) in &self.entries {
            let t = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            ordered.push(t);
        }
        self.set_tensors(ordered)
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }
}

pub trait Predictor: Send + Sync + fmt::Debug {
    fn label(&self) -> &'static str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Depth `[H, W]` from an image `[3, H, W]`, with parameters already
    /// on the tape in [`ParamSet`] order.
    fn forward_on(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<Var>;

    fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params().register(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let r = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -r, r, rng)
}

/// `d_lo + (d_hi - d_lo) * sigmoid(x)`.
fn squash_on(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.sigmoid(x)?;
    let s = tape.scale(s, DEPTH_HI - DEPTH_LO)?;
    tape.offset(s, DEPTH_LO)
}

fn image_hw(tape: &Tape, image: Var) -> Result<(usize, usize)> {
    match tape.value(image).shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::shape(
            "predictor",
            format!("expected a [3,H,W] image, got {s:?}"),
        )),
    }
}

/// Three 3x3 convolutions (3 -> 8 -> 8 -> 1) with ReLU, optionally with a
/// DGR block on the 8-channel features before the output layer.
#[derive(Clone, Debug)]
pub struct CnnToy {
    params: ParamSet,
    dgr: Option<DgrConfig>,
}

pub const CNN_WIDTH: usize = 8;

impl CnnToy {
    pub fn new(seed: u64, with_dgr: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CNN_WIDTH;
        let mut params = ParamSet::default();
        params.push("conv1.w", uniform_init(&[c, 3, 3, 3], 27, &mut rng));
        params.push("conv1.b", Tensor::zeros(&[c]));
        params.push("conv2.w", uniform_init(&[c, c, 3, 3], 9 * c, &mut rng));
        params.push("conv2.b", Tensor::zeros(&[c]));
        let dgr = if with_dgr {
            let mut cfg = DgrConfig::new(c, 4, 2)?;
            cfg.residual = true;
            for (name, t) in DgrParams::init(&cfg, &mut rng).named() {
                params.push(format!("dgr.{name}"), t);
            }
            Some(cfg)
        } else {
            None
        };
        params.push("conv3.w", uniform_init(&[1, c, 3, 3], 9 * c, &mut rng));
        params.push("conv3.b", Tensor::zeros(&[1]));
        Ok(Self { params, dgr })
    }

    pub fn with_dgr(&self) -> bool {
        self.dgr.is_some()
    }
}

impl Predictor for CnnToy {
    fn label(&self) -> &'static str {
        if self.dgr.is_some() {
            "cnn_dgr_toy"
        } else {
            "cnn_toy"
        }
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_on(&self, tape: &mut Tape, p: &[Var], image: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let (h, w) = image_hw(tape, image)?;
        let x = tape.conv2d(image, p[0], Some(p[1]), Pad::Replicate)?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, p[2], Some(p[3]), Pad::Replicate)?;
        let mut x = tape.relu(x)?;
        let mut k = 4;
        if let Some(cfg) = &self.dgr {
            let vars = DgrVars::from_slice(&p[4..14]);
            x = dgr::forward_on(tape, x, &vars, cfg)?;
            k = 14;
        }
        let x = tape.conv2d(x, p[k], Some(p[k + 1]), Pad::Replicate)?;
        let x = squash_on(tape, x)?;
        tape.reshape(x, &[h, w])
    }
}

/// Patch size of the attention toy.
pub const PATCH: usize = 8;
const EMBED: usize = 16;

/// Single-head self-attention over non-overlapping 8x8 patches with a
/// residual connection and a per-patch linear decoder.
#[derive(Clone, Debug)]
pub struct AttnToy {
    params: ParamSet,
    height: usize,
    width: usize,
    to_tokens: Arc<[usize]>,
    to_pixels: Arc<[usize]>,
}

impl AttnToy {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        if height % PATCH != 0 || width % PATCH != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image size {height}x{width} must be a positive multiple of {PATCH}"
            )));
        }
        let (th, tw) = (height / PATCH, width / PATCH);
        let tokens = th * tw;
        let feat = 3 * PATCH * PATCH;
        let mut to_tokens = Vec::with_capacity(tokens * feat);
        for t in 0..tokens {
            let (py, px) = (t / tw, t % tw);
            for c in 0..3 {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        to_tokens
                            .push(c * height * width + (py * PATCH + dy) * width + px * PATCH + dx);
                    }
                }
            }
        }
        let mut to_pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let t = (y / PATCH) * tw + x / PATCH;
                to_pixels.push(t * PATCH * PATCH + (y % PATCH) * PATCH + x % PATCH);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        params.push("embed.w", uniform_init(&[feat, EMBED], feat, &mut rng));
        params.push("embed.b", Tensor::zeros(&[EMBED]));
        params.push(
            "pos",
            Tensor::uniform(&[tokens, EMBED], -0.1, 0.1, &mut rng),
        );
        params.push("query.w", uniform_init(&[EMBED, EMBED], EMBED, &mut rng));
        params.push("key.w", uniform_init(&[EMBED, EMBED], EMBED, &mut rng));
        params.push("value.w", uniform_init(&[EMBED, EMBED], EMBED, &mut rng));
        params.push(
            "decode.w",
            uniform_init(&[EMBED, PATCH * PATCH], EMBED, &mut rng),
        );
        params.push("decode.b", Tensor::zeros(&[PATCH * PATCH]));
        Ok(Self {
            params,
            height,
            width,
            to_tokens: to_tokens.into(),
            to_pixels: to_pixels.into(),
        })
    }
}

impl Predictor for AttnToy {
    fn label(&self) -> &'static str {
        "attn_toy"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_on(&self, tape: &mut Tape, p: &[Var], image: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let (h, w) = image_hw(tape, image)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "attn_toy",
                format!("built for {}x{}, got {h}x{w}", self.height, self.width),
            ));
        }
        let tokens = (h / PATCH) * (w / PATCH);
        let x = tape.gather(image, self.to_tokens.clone(), &[tokens, 3 * PATCH * PATCH])?;
        let e = tape.linear(x, p[0], Some(p[1]))?;
        let e = tape.add(e, p[2])?;
        let e = tape.relu(e)?;
        let q = tape.linear(e, p[3], None)?;
        let k = tape.linear(e, p[4], None)?;
        let v = tape.linear(e, p[5], None)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (EMBED as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let hdn = tape.add(e, ctx)?;
        let out = tape.linear(hdn, p[6], Some(p[7]))?;
        let out = squash_on(tape, out)?;
        tape.gather(out, self.to_pixels.clone(), &[h, w])
    }
}

/// Full-batch training: the per-scene losses from `loss` are averaged and
/// minimized with Adam. Returns the loss before each step and after the
/// last one (`steps + 1` values).
pub fn fit<F>(
    predictor: &mut dyn Predictor,
    scenes: &[Scene],
    steps: usize,
    lr: f64,
    loss: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var, &Scene) -> Result<Var>,
{
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    let mut tape = Tape::new();
    let params = predictor.params().register(&mut tape, true);
    let mut per_scene = Vec::with_capacity(scenes.len());
    for s in scenes {
        let x = tape.constant(s.image.clone());
        let y = predictor.forward_on(&mut tape, &params, x)?;
        per_scene.push(loss(&mut tape, y, s)?);
    }
    let mut total = per_scene[0];
    for &l in &per_scene[1..] {
        total = tape.add(total, l)?;
    }
    let total = tape.scale(total, 1.0 / scenes.len() as f64)?;

    let mut opt = Adam::new(lr);
    let mut values = predictor.params().tensors();
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            let leaves: Vec<(Var, Tensor)> =
                params.iter().copied().zip(values.iter().cloned()).collect();
            tape.replay(&leaves).map_err(|e| match e {
                Error::Domain { .. } => Error::Diverged { step },
                other => other,
            })?;
        }
        let value = tape.value(total).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(value);
        if step == steps {
            break;
        }
        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = params
            .iter()
            .zip(&values)
            .map(|(&v, t)| grads.of_or_zeros(v, t.shape()).0)
            .collect();
        opt.step(&mut values, &g)?;
    }
    predictor.params_mut().set_tensors(values)?;
    Ok(curve)
}

/// Settings for the harness's own pretraining of a toy predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub scenes: usize,
    pub steps: usize,
    pub lr: f64,
    pub scene: SceneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            steps: 150,
            lr: 0.01,
            scene: SceneConfig::default(),
        }
    }
}

/// Trains `predictor` with MSE on scenes drawn from `seed`.
pub fn pretrain(
    predictor: &mut dyn Predictor,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_set(&cfg.scene, cfg.scenes, &mut rng)?;
    fit(predictor, &scenes, cfg.steps, cfg.lr, |tape, y, s| {
        let gt = tape.constant(s.depth.clone());
        mse_on(tape, y, gt)
    })
}
