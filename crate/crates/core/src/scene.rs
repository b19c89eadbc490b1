//! Procedural scenes with analytic depth: a tilted background plane with
//! fronto-parallel boxes in front of it.
//!
//! The rendered image has three channels: atmospheric attenuation
//! `exp(-d / 4)`, a per-surface albedo with a checker texture, and their
//! product as a shaded intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_boxes: usize,
    /// Depth range of the background plane.
    pub near: f64,
    pub far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            max_boxes: 3,
            near: 1.0,
            far: 8.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "scenes need at least 8x8 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`.
    pub image: Tensor,
    /// `[H, W]`, strictly positive.
    pub depth: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Surface {
    depth: f64,
    albedo: f64,
    checker: usize,
}

pub fn generate<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    // plane d = c + gx * u + gy * v over u, v in [0, 1], kept inside [near, far]
    let span = cfg.far - cfg.near;
    let lo = cfg.near + rng.gen_range(0.0..0.3) * span;
    let hi = cfg.far - rng.gen_range(0.0..0.3) * span;
    let mix: f64 = rng.gen_range(0.0..1.0);
    let (gx, gy) = ((hi - lo) * mix, (hi - lo) * (1.0 - mix));
    let flip_x = rng.gen_bool(0.5);
    let background = Surface {
        depth: 0.0,
        albedo: rng.gen_range(0.3..0.9),
        checker: rng.gen_range(3..7),
    };

    let boxes = rng.gen_range(0..=cfg.max_boxes);
    let mut rects = Vec::with_capacity(boxes);
    for _ in 0..boxes {
        let bh = rng.gen_range(h / 6..=h / 2);
        let bw = rng.gen_range(w / 6..=w / 2);
        let y0 = rng.gen_range(0..=h - bh);
        let x0 = rng.gen_range(0..=w - bw);
        let surface = Surface {
            depth: rng.gen_range(cfg.near..cfg.near + 0.6 * span),
            albedo: rng.gen_range(0.2..1.0),
            checker: rng.gen_range(2..5),
        };
        rects.push((y0, x0, bh, bw, surface));
    }

    let mut depth = Tensor::zeros(&[h, w]);
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / (w - 1) as f64;
            let v = y as f64 / (h - 1) as f64;
            let u = if flip_x { 1.0 - u } else { u };
            let mut d = lo + gx * u + gy * v;
            let mut s = background;
            for &(y0, x0, bh, bw, surface) in &rects {
                // boxes occlude the plane and each other by depth
                if (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x) && surface.depth < d {
                    d = surface.depth;
                    s = surface;
                }
            }
            let checker = if ((y / s.checker) + (x / s.checker)) % 2 == 0 {
                1.0
            } else {
                0.8
            };
            let albedo = s.albedo * checker;
            let fog = (-d / 4.0).exp();
            depth.set(&[y, x], d);
            image.set(&[0, y, x], fog);
            image.set(&[1, y, x], albedo);
            image.set(&[2, y, x], albedo * fog);
        }
    }
    Ok(Scene { image, depth })
}

/// `count` scenes from one generator stream.
pub fn generate_set<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Scene>> {
    (0..count).map(|_| generate(cfg, rng)).collect()
}

/// One scene from a stream of `seed` that [`generate_set`] over
/// `seed_from_u64(seed)` never draws from.
pub fn held_out(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    generate(cfg, &mut rng)
}
