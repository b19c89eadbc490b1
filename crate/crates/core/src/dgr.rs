//! Depth gradient refinement block.
//!
//! Given a feature map `F` of `C` channels the block computes
//!
//! ```text
//! merged  = [F | lap(F) | d3(F)]                          3C channels
//! w       = sigmoid(FC2(relu(FC1(gap(merged)))))          one gate per channel
//! spatial = Conv3x3(relu(merged * w))
//! out     = Conv1x1(outer(Pa spatial, Pb merged))         C channels
//! ```
//!
//! where `outer` forms, at each pixel, the `ρ x ρ` outer product of the two
//! projected channel vectors. `ρ = 3C` with identity projections recovers
//! the unprojected interaction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Pad;
use crate::stencil::{laplacian_on, third_order_on};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DgrConfig {
    pub channels: usize,
    pub reduction: usize,
    pub rank: usize,
    /// Add the input back onto the block output.
    pub residual: bool,
}

impl DgrConfig {
    pub fn new(channels: usize, reduction: usize, rank: usize) -> Result<Self> {
        let cfg = DgrConfig {
            channels,
            reduction,
            rank,
            residual: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let merged = 3 * self.channels;
        if self.channels == 0 || self.reduction == 0 || merged % self.reduction != 0 {
            return Err(Error::invalid(format!(
                "reduction {} must divide 3C = {merged}",
                self.reduction
            )));
        }
        if self.rank == 0 || self.rank > merged {
            return Err(Error::invalid(format!(
                "interaction rank must lie in 1..={merged}, got {}",
                self.rank
            )));
        }
        Ok(())
    }

    pub fn merged(&self) -> usize {
        3 * self.channels
    }

    pub fn squeezed(&self) -> usize {
        self.merged() / self.reduction
    }
}

/// Trainable tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct DgrParams {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub proj_a: Tensor,
    pub proj_b: Tensor,
    pub reduce_w: Tensor,
    pub reduce_b: Tensor,
}

const NAMES: [&str; 10] = [
    "fc1_w", "fc1_b", "fc2_w", "fc2_b", "conv_w", "conv_b", "proj_a", "proj_b", "reduce_w",
    "reduce_b",
];

impl DgrParams {
    fn shapes(cfg: &DgrConfig) -> [Vec<usize>; 10] {
        let (c, m, s, r) = (cfg.channels, cfg.merged(), cfg.squeezed(), cfg.rank);
        [
            vec![s, m],
            vec![s],
            vec![m, s],
            vec![m],
            vec![m, m, 3, 3],
            vec![m],
            vec![r, m],
            vec![r, m],
            vec![c, r * r],
            vec![c],
        ]
    }

    pub fn zeros(cfg: &DgrConfig) -> Self {
        let t = Self::shapes(cfg).map(|s| Tensor::zeros(&s));
        Self::from_array(t)
    }

    /// Weights from `U(-1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(cfg: &DgrConfig, rng: &mut R) -> Self {
        let t = Self::shapes(cfg).map(|s| {
            if s.len() == 1 {
                return Tensor::zeros(&s);
            }
            let fan_in: usize = s[1..].iter().product();
            let k = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(&s, -k, k, rng)
        });
        Self::from_array(t)
    }

    fn from_array(t: [Tensor; 10]) -> Self {
        let [fc1_w, fc1_b, fc2_w, fc2_b, conv_w, conv_b, proj_a, proj_b, reduce_w, reduce_b] = t;
        DgrParams {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            conv_w,
            conv_b,
            proj_a,
            proj_b,
            reduce_w,
            reduce_b,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
            &self.conv_w,
            &self.conv_b,
            &self.proj_a,
            &self.proj_b,
            &self.reduce_w,
            &self.reduce_b,
        ]
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuilds parameters from tensors in [`DgrParams::named`] order,
    /// checking every shape against `cfg`.
    pub fn from_tensors(cfg: &DgrConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let arr: [Tensor; 10] = tensors.try_into().map_err(|v: Vec<Tensor>| {
            Error::invalid(format!("expected 10 DGR tensors, got {}", v.len()))
        })?;
        for ((t, s), name) in arr.iter().zip(Self::shapes(cfg)).zip(NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(
                    "dgr",
                    format!("{name} must be {s:?}, got {:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("{name} holds non-finite values")));
            }
        }
        Ok(Self::from_array(arr))
    }

    pub fn from_named(cfg: &DgrConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        for ((n, _), want) in named.iter().zip(NAMES) {
            if n != want {
                return Err(Error::invalid(format!(
                    "expected parameter {want}, found {n}"
                )));
            }
        }
        Self::from_tensors(cfg, named.into_iter().map(|(_, t)| t).collect())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DgrVars {
        let v: Vec<Var> = self
            .tensors()
            .iter()
            .map(|t| tape.leaf((*t).clone(), trainable))
            .collect();
        DgrVars::from_slice(&v)
    }
}

/// Tape handles for a registered [`DgrParams`].
#[derive(Clone, Copy, Debug)]
pub struct DgrVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub proj_a: Var,
    pub proj_b: Var,
    pub reduce_w: Var,
    pub reduce_b: Var,
}

impl DgrVars {
    /// Handles in [`DgrParams::named`] order. Panics on fewer than ten.
    pub fn from_slice(v: &[Var]) -> Self {
        DgrVars {
            fc1_w: v[0],
            fc1_b: v[1],
            fc2_w: v[2],
            fc2_b: v[3],
            conv_w: v[4],
            conv_b: v[5],
            proj_a: v[6],
            proj_b: v[7],
            reduce_w: v[8],
            reduce_b: v[9],
        }
    }

    pub fn all(&self) -> [Var; 10] {
        [
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
            self.conv_w,
            self.conv_b,
            self.proj_a,
            self.proj_b,
            self.reduce_w,
            self.reduce_b,
        ]
    }
}

/// `[F | lap(F) | d3(F)]`, applied channel-wise.
pub fn merge_on(tape: &mut Tape, features: Var) -> Result<Var> {
    if tape.value(features).rank() != 3 {
        return Err(Error::shape(
            "merge",
            format!(
                "features must be [C,H,W], got {:?}",
                tape.value(features).shape()
            ),
        ));
    }
    let second = laplacian_on(tape, features)?;
    let third = third_order_on(tape, features)?;
    tape.concat_channels(&[features, second, third])
}

pub fn channel_weights_on(tape: &mut Tape, merged: Var, p: &DgrVars) -> Result<Var> {
    let pooled = tape.gap(merged)?;
    let hidden = tape.fully_connected(pooled, p.fc1_w, p.fc1_b)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.fully_connected(hidden, p.fc2_w, p.fc2_b)?;
    tape.sigmoid(logits)
}

pub fn spatial_refine_on(tape: &mut Tape, merged: Var, weights: Var, p: &DgrVars) -> Result<Var> {
    let gated = tape.mul(merged, weights)?;
    let gated = tape.relu(gated)?;
    tape.conv2d(gated, p.conv_w, Some(p.conv_b), Pad::Zero)
}

/// 1x1 projection of a `[K,H,W]` map by a `[R,K]` matrix.
fn project(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let (r, k) = match tape.value(w).shape() {
        &[r, k] => (r, k),
        s => {
            return Err(Error::shape(
                "project",
                format!("projection must be rank 2, got {s:?}"),
            ))
        }
    };
    let kernel = tape.reshape(w, &[r, k, 1, 1])?;
    tape.conv2d(x, kernel, None, Pad::Zero)
}

pub fn interact_on(tape: &mut Tape, spatial: Var, merged: Var, p: &DgrVars) -> Result<Var> {
    if tape.value(spatial).shape() != tape.value(merged).shape() {
        return Err(Error::shape(
            "interact",
            format!(
                "{:?} vs {:?}",
                tape.value(spatial).shape(),
                tape.value(merged).shape()
            ),
        ));
    }
    let a = project(tape, spatial, p.proj_a)?;
    let b = project(tape, merged, p.proj_b)?;
    let outer = tape.outer_channels(a, b)?;
    let (c, rr) = match tape.value(p.reduce_w).shape() {
        &[c, rr] => (c, rr),
        s => {
            return Err(Error::shape(
                "interact",
                format!("reduce_w must be rank 2, got {s:?}"),
            ))
        }
    };
    let kernel = tape.reshape(p.reduce_w, &[c, rr, 1, 1])?;
    tape.conv2d(outer, kernel, Some(p.reduce_b), Pad::Zero)
}

/// Full block on a tape. Output has the input's shape.
pub fn forward_on(tape: &mut Tape, features: Var, p: &DgrVars, cfg: &DgrConfig) -> Result<Var> {
    let c = tape.value(features).shape().first().copied().unwrap_or(0);
    if c != cfg.channels {
        return Err(Error::shape(
            "dgr",
            format!("block expects {} channels, got {c}", cfg.channels),
        ));
    }
    let merged = merge_on(tape, features)?;
    let weights = channel_weights_on(tape, merged, p)?;
    let spatial = spatial_refine_on(tape, merged, weights, p)?;
    let out = interact_on(tape, spatial, merged, p)?;
    if cfg.residual {
        tape.add(out, features)
    } else {
        Ok(out)
    }
}

pub fn merge(features: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.constant(features.clone());
    let m = merge_on(&mut t, x)?;
    Ok(t.value(m).clone())
}

pub fn channel_weights(merged: &Tensor, params: &DgrParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = params.register(&mut t, false);
    let m = t.constant(merged.clone());
    let w = channel_weights_on(&mut t, m, &p)?;
    Ok(t.value(w).clone())
}

pub fn spatial_refine(merged: &Tensor, weights: &Tensor, params: &DgrParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = params.register(&mut t, false);
    let m = t.constant(merged.clone());
    let w = t.constant(weights.clone());
    let s = spatial_refine_on(&mut t, m, w, &p)?;
    Ok(t.value(s).clone())
}

pub fn interact(spatial: &Tensor, merged: &Tensor, params: &DgrParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = params.register(&mut t, false);
    let s = t.constant(spatial.clone());
    let m = t.constant(merged.clone());
    let o = interact_on(&mut t, s, m, &p)?;
    Ok(t.value(o).clone())
}

pub fn dgr_forward(features: &Tensor, params: &DgrParams, cfg: &DgrConfig) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = params.register(&mut t, false);
    let x = t.constant(features.clone());
    let o = forward_on(&mut t, x, &p, cfg)?;
    Ok(t.value(o).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{directional, relative_error, STEP};
    use crate::stencil::{laplacian, third_order};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(cfg: &DgrConfig, rng: &mut ChaCha8Rng) -> DgrParams {
        let mut p = DgrParams::init(cfg, rng);
        // non-zero biases so the bias paths are exercised
        for b in [&mut p.fc1_b, &mut p.fc2_b, &mut p.conv_b, &mut p.reduce_b] {
            *b = Tensor::uniform(b.shape(), -0.5, 0.5, rng);
        }
        p
    }

    #[test]
    fn config_validation() {
        assert!(DgrConfig::new(2, 4, 3).is_err());
        assert!(DgrConfig::new(2, 3, 7).is_err());
        assert!(DgrConfig::new(2, 3, 0).is_err());
        assert!(DgrConfig::new(2, 3, 6).is_ok());
    }

    #[test]
    fn merge_concatenates_stencil_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[2, 6, 7], -1.0, 1.0, &mut rng);
        let m = merge(&f).unwrap();
        assert_eq!(m.shape(), &[6, 6, 7]);
        let want =
            crate::ops::concat_channels(&[&f, &laplacian(&f).unwrap(), &third_order(&f).unwrap()])
                .unwrap();
        assert_eq!(m, want);
        assert!(merge(&Tensor::zeros(&[2, 4, 8])).is_err());
    }

    #[test]
    fn constant_features_have_zero_derivative_channels() {
        let f = Tensor::full(&[2, 5, 5], 1.75);
        let m = merge(&f).unwrap();
        assert!(m.data()[..50].iter().all(|&v| v == 1.75));
        assert!(m.data()[50..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let cfg = DgrConfig::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = merge(&Tensor::uniform(&[2, 5, 5], -3.0, 3.0, &mut rng)).unwrap();
        let w = channel_weights(&m, &DgrParams::zeros(&cfg)).unwrap();
        assert_eq!(w.data(), &[0.5; 6]);
    }

    #[test]
    fn identity_fc_layers_give_sigmoid_of_relu_means() {
        // C = 2, r = 1 so both FC layers are 6x6 and can be the identity
        let cfg = DgrConfig::new(2, 1, 2).unwrap();
        let mut p = DgrParams::zeros(&cfg);
        let eye = Tensor::from_fn(&[6, 6], |i| (i[0] == i[1]) as u8 as f64);
        p.fc1_w = eye.clone();
        p.fc2_w = eye;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::uniform(&[6, 4, 4], -2.0, 2.0, &mut rng);
        let w = channel_weights(&m, &p).unwrap();
        for c in 0..6 {
            let mean: f64 = m.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            let want = 1.0 / (1.0 + (-mean.max(0.0)).exp());
            assert!((w.data()[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_are_strictly_inside_unit_interval() {
        let cfg = DgrConfig::new(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let mut p = random_params(&cfg, &mut rng);
            p.fc2_b = p.fc2_b.map(|v| v * 200.0);
            let m = merge(&Tensor::uniform(&[3, 6, 6], -5.0, 5.0, &mut rng)).unwrap();
            let w = channel_weights(&m, &p).unwrap();
            assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn spatial_refine_reference_cases() {
        let cfg = DgrConfig::new(1, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = DgrParams::init(&cfg, &mut rng);
        let zero = Tensor::zeros(&[3, 5, 5]);
        let w = Tensor::from_vec(vec![0.3, 0.6, 0.9]);
        assert!(spatial_refine(&zero, &w, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        p.conv_b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let m = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let ones = Tensor::ones(&[3]);
        let got = spatial_refine(&m, &ones, &p).unwrap();
        let want = crate::ops::conv2d(
            &m.map(|v| v.max(0.0)),
            &p.conv_w,
            Some(&p.conv_b),
            Pad::Zero,
        )
        .unwrap();
        assert_eq!(got, want);
    }

    /// Per-pixel loop that forms the ρ x ρ outer product explicitly.
    fn interact_oracle(s: &Tensor, m: &Tensor, p: &DgrParams) -> Tensor {
        let (k, h, w) = s.chw().unwrap();
        let r = p.proj_a.shape()[0];
        let c = p.reduce_w.shape()[0];
        let mut out = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let pa: Vec<f64> = (0..r)
                    .map(|i| {
                        (0..k)
                            .map(|j| p.proj_a.get(&[i, j]) * s.get(&[j, y, x]))
                            .sum()
                    })
                    .collect();
                let pb: Vec<f64> = (0..r)
                    .map(|i| {
                        (0..k)
                            .map(|j| p.proj_b.get(&[i, j]) * m.get(&[j, y, x]))
                            .sum()
                    })
                    .collect();
                for o in 0..c {
                    let mut acc = p.reduce_b.data()[o];
                    for i in 0..r {
                        for j in 0..r {
                            acc += p.reduce_w.get(&[o, i * r + j]) * pa[i] * pb[j];
                        }
                    }
                    out.set(&[o, y, x], acc);
                }
            }
        }
        out
    }

    #[test]
    fn interact_matches_per_pixel_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for rank in [1, 3, 6] {
            let cfg = DgrConfig::new(2, 3, rank).unwrap();
            let p = random_params(&cfg, &mut rng);
            let s = Tensor::uniform(&[6, 4, 5], -1.0, 1.0, &mut rng);
            let m = Tensor::uniform(&[6, 4, 5], -1.0, 1.0, &mut rng);
            let got = interact(&s, &m, &p).unwrap();
            assert!(got.max_abs_diff(&interact_oracle(&s, &m, &p)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_leaves_only_bias() {
        let cfg = DgrConfig::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = random_params(&cfg, &mut rng);
        p.proj_a = Tensor::zeros(p.proj_a.shape());
        let s = Tensor::uniform(&[6, 3, 3], -1.0, 1.0, &mut rng);
        let out = interact(&s, &s, &p).unwrap();
        for c in 0..2 {
            assert!(out.data()[c * 9..(c + 1) * 9]
                .iter()
                .all(|&v| v == p.reduce_b.data()[c]));
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (c, h, w) in [(1, 5, 5), (2, 6, 8), (4, 7, 5)] {
            let cfg = DgrConfig::new(c, 3, 2).unwrap();
            let p = DgrParams::init(&cfg, &mut rng);
            let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
            assert_eq!(dgr_forward(&x, &p, &cfg).unwrap().shape(), &[c, h, w]);
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_output() {
        let cfg = DgrConfig::new(3, 3, 4).unwrap();
        let p = DgrParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(15));
        let out = dgr_forward(&Tensor::zeros(&[3, 6, 6]), &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_flag_adds_input() {
        let mut cfg = DgrConfig::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = DgrParams::init(&cfg, &mut rng);
        let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let plain = dgr_forward(&x, &p, &cfg).unwrap();
        cfg.residual = true;
        let res = dgr_forward(&x, &p, &cfg).unwrap();
        assert!(
            res.max_abs_diff(&plain.zip_map(&x, |a, b| a + b).unwrap())
                .unwrap()
                < 1e-15
        );
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let cfg = DgrConfig::new(2, 3, 3).unwrap();
            let params = random_params(&cfg, &mut rng);
            let mut t = Tape::new();
            let p = params.register(&mut t, true);
            let x = t.param(Tensor::uniform(&[2, 6, 6], -2.0, 2.0, &mut rng));
            let y = forward_on(&mut t, x, &p, &cfg).unwrap();
            let probe = t.constant(Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng));
            let yw = t.mul(y, probe).unwrap();
            let l = t.sum(yw).unwrap();
            let mut leaves = vec![x];
            leaves.extend(p.all());
            let (a, n) = directional(&mut t, l, &leaves, STEP, &mut rng).unwrap();
            assert!(relative_error(a, n) < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn named_roundtrip_checks_shapes() {
        let cfg = DgrConfig::new(2, 3, 2).unwrap();
        let p = DgrParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(DgrParams::from_named(&cfg, p.named()).unwrap(), p);
        let other = DgrConfig::new(2, 3, 3).unwrap();
        assert!(DgrParams::from_named(&other, p.named()).is_err());
    }
}
