//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `p <- p (1 - lr wd) - lr m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::DimMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (one_b1, one_b2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(EPS);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::DimMismatch(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                *pj = *pj * decay - step * *mj / ((*vj * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("p", Matrix::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &[Matrix::zeros(1, 3)], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut p = scalar_set(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Matrix::scalar(1.0)], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = 1.0 - 0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((p.values()[0].get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_wd() {
        let mut p = scalar_set(2.0);
        let mut opt = AdamW::new(&p, 0.05);
        opt.step(&mut p, &[Matrix::scalar(0.0)], 0.01).unwrap();
        assert!((p.values()[0].get(0, 0) - 2.0 * (1.0 - 0.01 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = scalar_set(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        assert!(opt.step(&mut p, &[Matrix::zeros(2, 1)], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 50, 1e-3), 1e-3);
        assert!(cosine_lr(50, 50, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(25, 50, 1e-3) - 5e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=300).map(|e| cosine_lr(e, 300, 5e-4)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
