//! First-order optimizers over lists of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// `p -= lr * g`.
pub fn gd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::invalid("parameter list changed between Adam steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                pd[i] -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_moves_against_the_gradient() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        gd_step(&mut p, &[Tensor::from_vec(vec![0.5, -1.0])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[0.95, -1.9]);
        assert!(gd_step(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &[Tensor::from_vec(vec![3.0, -0.2])])
            .unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-8);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(vec![3.0, -4.0])];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * x);
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
