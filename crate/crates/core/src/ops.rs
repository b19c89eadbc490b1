//! Forward kernels and their adjoints.
//!
//! Every function here is pure. The tape records which kernel produced a
//! node and calls the matching `*_backward` during the reverse sweep.

use crate::error::{Error, Result};
use crate::stencil::Stencil;
use crate::tensor::Tensor;

/// Border handling for same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pad {
    /// Out-of-range taps read the nearest edge sample.
    #[default]
    Replicate,
    /// Out-of-range taps read zero.
    Zero,
}

#[inline]
fn tap(pos: isize, n: usize, pad: Pad) -> Option<usize> {
    if pos >= 0 && (pos as usize) < n {
        return Some(pos as usize);
    }
    match pad {
        Pad::Replicate => Some(pos.clamp(0, n as isize - 1) as usize),
        Pad::Zero => None,
    }
}

/// Source index for every (kernel offset, output position) along one axis.
fn tap_table(n: usize, k: usize, pad: Pad) -> Vec<Option<usize>> {
    let r = (k / 2) as isize;
    let mut table = Vec::with_capacity(k * n);
    for dk in 0..k as isize {
        for p in 0..n as isize {
            table.push(tap(p + dk - r, n, pad));
        }
    }
    table
}

/// Cross-correlation `out[o,y,x] = b[o] + Σ w[o,i,ky,kx] · in[i, y+ky-r, x+kx-r]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: Pad) -> Result<Tensor> {
    let (ci, h, w) = conv_input(input)?;
    let (co, kh, kw) = conv_weight(weight, ci)?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{co}], got {:?}", b.shape()),
            ));
        }
    }
    let rows = tap_table(h, kh, pad);
    let cols = tap_table(w, kw, pad);
    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        if let Some(b) = bias {
            plane.fill(b.data()[o]);
        }
        for i in 0..ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let c = k[((o * ci + i) * kh + ky) * kw + kx];
                    if c == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let Some(sy) = rows[ky * h + y] else { continue };
                        let dst = &mut plane[y * w..(y + 1) * w];
                        let srow = &src[sy * w..(sy + 1) * w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            if let Some(sx) = cols[kx * w + xx] {
                                *d += c * srow[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, w], out)
}

/// Adjoint of [`conv2d`]: gradients for input, weight and (if present) bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    pad: Pad,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (ci, h, w) = conv_input(input).expect("validated in forward");
    let (co, kh, kw) = conv_weight(weight, ci).expect("validated in forward");
    let rows = tap_table(h, kh, pad);
    let cols = tap_table(w, kw, pad);
    let x = input.data();
    let k = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; k.len()];
    for o in 0..co {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for i in 0..ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            let gsrc = &mut gx[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ci + i) * kh + ky) * kw + kx;
                    let c = k[widx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let Some(sy) = rows[ky * h + y] else { continue };
                        for xx in 0..w {
                            if let Some(sx) = cols[kx * w + xx] {
                                let go = gplane[y * w + xx];
                                acc += go * src[sy * w + sx];
                                gsrc[sy * w + sx] += c * go;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    let gb = with_bias.then(|| {
        Tensor::from_vec(
            (0..co)
                .map(|o| crate::tensor::pairwise_sum(&g[o * h * w..(o + 1) * h * w]))
                .collect(),
        )
    });
    (
        Tensor::new(input.shape().to_vec(), gx).expect("same shape"),
        Tensor::new(weight.shape().to_vec(), gw).expect("same shape"),
        gb,
    )
}

fn conv_input(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(
            "conv2d",
            format!("input must be [C,H,W], got {s:?}"),
        )),
    }
}

fn conv_weight(weight: &Tensor, ci: usize) -> Result<(usize, usize, usize)> {
    let &[co, wi, kh, kw] = weight.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [Co,Ci,kh,kw], got {:?}", weight.shape()),
        ));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    if wi != ci {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {wi} input channels, input has {ci}"),
        ));
    }
    Ok((co, kh, kw))
}

/// Applies a fixed stencil to every channel independently.
///
/// Accepts `[C,H,W]` or `[H,W]`; the output has the input's shape.
pub fn apply_stencil(input: &Tensor, stencil: &Stencil, pad: Pad) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (kh, kw) = stencil.extent();
    let rows = tap_table(h, kh, pad);
    let cols = tap_table(w, kw, pad);
    let coeffs = stencil.coefficients();
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let Some(sy) = rows[ky * h + y] else { continue };
                    for kx in 0..kw {
                        let cf = coeffs[ky * kw + kx];
                        if cf == 0.0 {
                            continue;
                        }
                        if let Some(sx) = cols[kx * w + xx] {
                            acc += cf * src[sy * w + sx];
                        }
                    }
                }
                dst[y * w + xx] = acc * stencil.scale();
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Adjoint of [`apply_stencil`]: scatter with the same taps.
pub fn apply_stencil_backward(
    input_shape: &[usize],
    stencil: &Stencil,
    pad: Pad,
    grad_out: &Tensor,
) -> Tensor {
    let (c, h, w) = grad_out.chw().expect("validated in forward");
    let (kh, kw) = stencil.extent();
    let rows = tap_table(h, kh, pad);
    let cols = tap_table(w, kw, pad);
    let coeffs = stencil.coefficients();
    let g = grad_out.data();
    let mut gx = vec![0.0; g.len()];
    for ch in 0..c {
        let gsrc = &g[ch * h * w..(ch + 1) * h * w];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let go = gsrc[y * w + xx] * stencil.scale();
                for ky in 0..kh {
                    let Some(sy) = rows[ky * h + y] else { continue };
                    for kx in 0..kw {
                        if let Some(sx) = cols[kx * w + xx] {
                            dst[sy * w + sx] += coeffs[ky * kw + kx] * go;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("same shape")
}

/// Checks the per-channel broadcast rule: `b` matches `a` exactly, or `b` is
/// a vector with one entry per leading channel of a rank ≥ 2 tensor.
pub(crate) fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    if b.rank() == 1 && a.rank() >= 2 && b.len() == a.shape()[0] {
        return Ok(true);
    }
    Err(Error::shape(
        op,
        format!(
            "{:?} and {:?} are neither equal nor per-channel broadcastable",
            a.shape(),
            b.shape()
        ),
    ))
}

/// Elementwise binary map with optional per-channel broadcast of `b`.
pub(crate) fn binary(
    a: &Tensor,
    b: &Tensor,
    per_channel: bool,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if !per_channel {
        return a.zip_map(b, f).expect("shapes checked");
    }
    let inner = a.len() / a.shape()[0];
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i / inner]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums a full-shape gradient down to the per-channel vector shape.
pub(crate) fn reduce_per_channel(grad: &Tensor, channels: usize) -> Tensor {
    let inner = grad.len() / channels;
    Tensor::from_vec(
        (0..channels)
            .map(|c| crate::tensor::pairwise_sum(&grad.data()[c * inner..(c + 1) * inner]))
            .collect(),
    )
}

/// Global average pool: one spatial mean per channel of a `[C, ...]` tensor.
pub fn gap(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 3 {
        return Err(Error::shape(
            "gap",
            format!("needs rank >= 3 (channels x spatial), got {:?}", a.shape()),
        ));
    }
    let c = a.shape()[0];
    let inner = a.len() / c;
    Ok(Tensor::from_vec(
        (0..c)
            .map(|ch| {
                crate::tensor::pairwise_sum(&a.data()[ch * inner..(ch + 1) * inner]) / inner as f64
            })
            .collect(),
    ))
}

/// `y = W x + b` for `x: [n]`, `W: [m, n]`, `b: [m]`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = match weight.shape() {
        &[m, n] => (m, n),
        s => {
            return Err(Error::shape(
                "fully_connected",
                format!("weight must be [m,n], got {s:?}"),
            ))
        }
    };
    if x.shape() != [n] || bias.shape() != [m] {
        return Err(Error::shape(
            "fully_connected",
            format!(
                "weight [{m},{n}] needs x [{n}] and b [{m}], got {:?} and {:?}",
                x.shape(),
                bias.shape()
            ),
        ));
    }
    let w = weight.data();
    Ok(Tensor::from_vec(
        (0..m)
            .map(|r| {
                let row = &w[r * n..(r + 1) * n];
                bias.data()[r] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
    ))
}

/// Matrix product `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!(
                "operands must be rank 2, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::shape(
            "transpose",
            format!("needs rank 2, got {:?}", a.shape()),
        ));
    };
    Ok(Tensor::from_fn(&[n, m], |i| a.data()[i[1] * n + i[0]]))
}

/// Numerically stable softmax along the last axis of a matrix.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::shape(
            "softmax_rows",
            format!("needs rank 2, got {:?}", a.shape()),
        ));
    };
    let mut out = a.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-pixel outer product of two `[ρ,H,W]` maps, flattened to `[ρ²,H,W]`
/// with channel `i·ρ + j` holding `a[i]·b[j]`.
pub fn outer_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape(
            "outer_channels",
            format!(
                "needs two equal [R,H,W] maps, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let (r, h, w) = a.chw()?;
    let hw = h * w;
    let mut out = vec![0.0; r * r * hw];
    for i in 0..r {
        for j in 0..r {
            let dst = &mut out[(i * r + j) * hw..(i * r + j + 1) * hw];
            let (ai, bj) = (
                &a.data()[i * hw..(i + 1) * hw],
                &b.data()[j * hw..(j + 1) * hw],
            );
            for p in 0..hw {
                dst[p] = ai[p] * bj[p];
            }
        }
    }
    Tensor::new(vec![r * r, h, w], out)
}

pub fn outer_channels_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (r, h, w) = a.chw().expect("validated in forward");
    let hw = h * w;
    let g = grad_out.data();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..r {
        for j in 0..r {
            let gp = &g[(i * r + j) * hw..(i * r + j + 1) * hw];
            for p in 0..hw {
                ga[i * hw + p] += gp[p] * b.data()[j * hw + p];
                gb[j * hw + p] += gp[p] * a.data()[i * hw + p];
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("same shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("same shape"),
    )
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one part"))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial extents differ: {h}x{w} vs {ph}x{pw}"),
            ));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}
