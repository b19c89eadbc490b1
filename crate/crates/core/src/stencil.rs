//! Fixed-coefficient differential operators on 2D grids.
//!
//! Stencils are applied as cross-correlations: the coefficient at offset
//! `(dy, dx)` multiplies the sample at `(y + dy, x + dx)`. Every derivative
//! stencil here has coefficients summing to exactly zero, so constants map
//! to exactly zero.

use crate::error::{Error, Result};
use crate::ops::{apply_stencil, Pad};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    height: usize,
    width: usize,
    coefficients: Vec<f64>,
    scale: f64,
}

impl Stencil {
    /// `coefficients` is row-major `height x width`; every output is
    /// multiplied by `scale`.
    pub fn new(height: usize, width: usize, coefficients: Vec<f64>, scale: f64) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return Err(Error::shape(
                "stencil",
                format!("extents must be odd, got {height}x{width}"),
            ));
        }
        if coefficients.len() != height * width {
            return Err(Error::shape(
                "stencil",
                format!("{height}x{width} needs {} coefficients", height * width),
            ));
        }
        Ok(Stencil {
            height,
            width,
            coefficients,
            scale,
        })
    }

    /// The 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
    pub fn laplacian() -> Self {
        #[rustfmt::skip]
        let c = vec![
            0.0,  1.0, 0.0,
            1.0, -4.0, 1.0,
            0.0,  1.0, 0.0,
        ];
        Stencil::new(3, 3, c, 1.0).expect("valid")
    }

    /// Sum of the x- and y-direction central third differences,
    /// `(-1/2, 1, 0, -1, 1/2)` along each axis, packed into one 5x5 kernel.
    ///
    /// Since both 1D stencils share the same padded samples, the packed
    /// kernel equals the sum of the two separable passes exactly.
    pub fn third_order() -> Self {
        let taps = [-1.0, 2.0, 0.0, -2.0, 1.0];
        let mut c = vec![0.0; 25];
        for (k, &t) in taps.iter().enumerate() {
            c[2 * 5 + k] += t;
            c[k * 5 + 2] += t;
        }
        Stencil::new(5, 5, c, 0.5).expect("valid")
    }

    /// x-direction part of [`Stencil::third_order`].
    pub fn third_order_x() -> Self {
        Stencil::new(1, 5, vec![-1.0, 2.0, 0.0, -2.0, 1.0], 0.5).expect("valid")
    }

    pub fn third_order_y() -> Self {
        Stencil::new(5, 1, vec![-1.0, 2.0, 0.0, -2.0, 1.0], 0.5).expect("valid")
    }

    /// Central first difference along x: `(f(x+1) - f(x-1)) / 2`.
    pub fn central_x() -> Self {
        Stencil::new(1, 3, vec![-1.0, 0.0, 1.0], 0.5).expect("valid")
    }

    pub fn central_y() -> Self {
        Stencil::new(3, 1, vec![-1.0, 0.0, 1.0], 0.5).expect("valid")
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// The 180°-rotated stencil. Applying it (with zero padding) is the
    /// adjoint of applying `self` away from the border.
    pub fn flipped(&self) -> Self {
        let mut c = self.coefficients.clone();
        c.reverse();
        Stencil {
            coefficients: c,
            ..self.clone()
        }
    }

    /// Half-extent of the stencil, i.e. how far from the border a point must
    /// be for no tap to touch padding.
    pub fn reach(&self) -> usize {
        self.height.max(self.width) / 2
    }
}

fn check_spatial(op: &'static str, d: &Tensor, min: usize) -> Result<()> {
    let (_, h, w) = d.chw()?;
    if h < min || w < min {
        return Err(Error::shape(
            op,
            format!("spatial extents must be >= {min}, got {h}x{w}"),
        ));
    }
    Ok(())
}

/// Discrete Laplacian of each channel, replicate padding.
pub fn laplacian(d: &Tensor) -> Result<Tensor> {
    check_spatial("laplacian", d, 3)?;
    apply_stencil(d, &Stencil::laplacian(), Pad::Replicate)
}

/// Third-order derivative response of each channel, replicate padding.
pub fn third_order(d: &Tensor) -> Result<Tensor> {
    check_spatial("third_order", d, 5)?;
    apply_stencil(d, &Stencil::third_order(), Pad::Replicate)
}

/// [`laplacian`] recorded on a tape.
pub fn laplacian_on(tape: &mut Tape, d: Var) -> Result<Var> {
    check_spatial("laplacian", tape.value(d), 3)?;
    tape.stencil(d, &Stencil::laplacian(), Pad::Replicate)
}

/// [`third_order`] recorded on a tape.
pub fn third_order_on(tape: &mut Tape, d: Var) -> Result<Var> {
    check_spatial("third_order", tape.value(d), 5)?;
    tape.stencil(d, &Stencil::third_order(), Pad::Replicate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn interior(h: usize, w: usize, reach: usize) -> impl Iterator<Item = (usize, usize)> {
        (reach..h - reach).flat_map(move |y| (reach..w - reach).map(move |x| (y, x)))
    }

    #[test]
    fn coefficients_sum_to_zero() {
        for s in [
            Stencil::laplacian(),
            Stencil::third_order(),
            Stencil::third_order_x(),
            Stencil::central_x(),
            Stencil::central_y(),
        ] {
            assert_eq!(s.coefficients().iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn constants_map_to_zero_everywhere() {
        let d = Tensor::full(&[2, 7, 6], 3.25);
        assert!(laplacian(&d).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(third_order(&d).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_paraboloid_is_four() {
        let d = Tensor::from_fn(&[9, 11], |i| {
            let (y, x) = (i[0] as f64 - 3.0, i[1] as f64 + 2.0);
            x * x + y * y
        });
        let l = laplacian(&d).unwrap();
        for (y, x) in interior(9, 11, 1) {
            assert_eq!(l.get(&[y, x]), 4.0);
        }
    }

    #[test]
    fn third_difference_of_cubic_is_six() {
        let d = Tensor::from_fn(&[7, 10], |i| {
            let x = i[1] as f64 - 4.0;
            x * x * x
        });
        let t = apply_stencil(&d, &Stencil::third_order_x(), Pad::Replicate).unwrap();
        for (y, x) in interior(7, 10, 2) {
            assert_eq!(t.get(&[y, x]), 6.0);
        }
        // the y pass sees a field that is constant along y
        let full = third_order(&d).unwrap();
        for (y, x) in interior(7, 10, 2) {
            assert_eq!(full.get(&[y, x]), 6.0);
        }
    }

    #[test]
    fn quadratics_have_no_third_derivative() {
        let d = Tensor::from_fn(&[8, 8], |i| {
            let (y, x) = (i[0] as f64, i[1] as f64);
            x * x - 3.0 * y * y + 0.5 * x
        });
        let t = third_order(&d).unwrap();
        for (y, x) in interior(8, 8, 2) {
            assert!(t.get(&[y, x]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_fields_are_annihilated_in_the_interior() {
        let d = Tensor::from_fn(&[8, 9], |i| 1.5 * i[0] as f64 - 0.25 * i[1] as f64 + 2.0);
        let (l, t) = (laplacian(&d).unwrap(), third_order(&d).unwrap());
        for (y, x) in interior(8, 9, 2) {
            assert!(l.get(&[y, x]).abs() < 1e-12);
            assert!(t.get(&[y, x]).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_third_order_equals_separable_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Tensor::uniform(&[2, 6, 7], -1.0, 1.0, &mut rng);
        let packed = third_order(&d).unwrap();
        let sx = apply_stencil(&d, &Stencil::third_order_x(), Pad::Replicate).unwrap();
        let sy = apply_stencil(&d, &Stencil::third_order_y(), Pad::Replicate).unwrap();
        let sum = sx.zip_map(&sy, |a, b| a + b).unwrap();
        assert!(packed.max_abs_diff(&sum).unwrap() < 1e-12);
    }

    #[test]
    fn laplacian_matches_direct_stencil_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Tensor::uniform(&[5, 6], -2.0, 2.0, &mut rng);
        let l = laplacian(&d).unwrap();
        let at = |y: i64, x: i64| d.get(&[y.clamp(0, 4) as usize, x.clamp(0, 5) as usize]);
        for y in 0..5i64 {
            for x in 0..6i64 {
                let want =
                    at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                assert!((l.get(&[y as usize, x as usize]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_is_the_adjoint_stencil() {
        use crate::gradcheck::{max_relative_error, numeric_gradient, STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for pad in [Pad::Replicate, Pad::Zero] {
            for s in [Stencil::laplacian(), Stencil::third_order()] {
                let mut t = Tape::new();
                let x = t.param(Tensor::uniform(&[2, 6, 6], -2.0, 2.0, &mut rng));
                let w = t.constant(Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng));
                let y = t.stencil(x, &s, pad).unwrap();
                let yw = t.mul(y, w).unwrap();
                let l = t.sum(yw).unwrap();
                let g = t.backward(l).unwrap().of(x).unwrap().clone();
                let fd = numeric_gradient(&mut t, l, x, STEP).unwrap();
                assert!(max_relative_error(&g, &fd).unwrap() < 1e-7);
                if pad == Pad::Zero {
                    // with zero padding the adjoint is the flipped stencil
                    let flipped = apply_stencil(t.value(w), &s.flipped(), Pad::Zero).unwrap();
                    assert!(g.max_abs_diff(&flipped).unwrap() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn undersized_maps_are_rejected() {
        assert!(laplacian(&Tensor::zeros(&[2, 5])).is_err());
        assert!(third_order(&Tensor::zeros(&[4, 9])).is_err());
        assert!(Stencil::new(2, 3, vec![0.0; 6], 1.0).is_err());
    }
}
