//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Optimizer state for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub moments: Vec<Moments>,
    /// Completed steps; bias correction uses `step + 1` on the next update.
    pub step: u64,
}

impl Adam {
    pub fn new<'a, I: IntoIterator<Item = &'a Tensor>>(params: I) -> Self {
        Adam {
            moments: params.into_iter().map(|t| Moments::zeros(t.numel())).collect(),
            step: 0,
        }
    }

    /// Applies one update. Gradients are checked for NaN/Inf before any
    /// parameter is touched, so a failed step leaves everything unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.moments[i].m.len() != g.len() {
                return Err(Error::dim(format!("adam: tensor {i} has {} values, grad {}", p.numel(), g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("adam: non-finite gradient for tensor {i}")));
            }
        }
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(&mut mo.m).zip(&mut mo.v) {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr * mh / (vh.sqrt() + EPS);
            }
        }
        self.step += 1;
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let n = global_norm(grads);
    if n > max {
        let k = max / n;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut opt = Adam::new([&p]);
        opt.moments[0].m = vec![0.5, 0.5];
        opt.moments[0].v = vec![0.25, 0.25];
        opt.step = 3;
        let before = p.clone();
        let g = [0.0, 0.0];
        opt.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert!((opt.moments[0].m[0] - 0.45).abs() < 1e-15);
        assert!((opt.moments[0].v[0] - 0.25 * 0.999).abs() < 1e-15);
        // momentum still moves the parameter; a fresh optimizer does not
        assert!(p.data()[0] < before.data()[0]);
        let mut q = Tensor::from_vec(vec![1.0, -2.0]);
        let mut fresh = Adam::new([&q]);
        fresh.step(&mut [&mut q], &[&g], 0.1).unwrap();
        assert!(q.bitwise_eq(&before));
    }

    #[test]
    fn constant_gradient_step_is_lr_sized() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut opt = Adam::new([&p]);
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut [&mut p], &[&[3.0]], 0.01).unwrap();
            let d = prev - p.data()[0];
            assert!((d - 0.01).abs() < 1e-8, "{d}");
            prev = p.data()[0];
        }
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // f(x) = (x - 3)^2
        let mut p = Tensor::from_vec(vec![0.5]);
        let mut opt = Adam::new([&p]);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.step(&mut [&mut p], &[&[g]], 0.05).unwrap();
            let gr = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_scales_jointly() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut opt = Adam::new([&p]);
        let err = opt.step(&mut [&mut p], &[&[0.1, f64::NAN]], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }
}
