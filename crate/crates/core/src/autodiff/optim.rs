use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            hyper,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn for_params(hyper: AdamHyper, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(hyper, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - f64::from(beta1).powi(t);
        let bc2 = 1.0 - f64::from(beta2).powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = f64::from(*mv) / bc1;
                let v_hat = f64::from(*vv) / bc2;
                *w -= (f64::from(lr) * m_hat / (v_hat.sqrt() + f64::from(eps))) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::for_params(AdamHyper::default(), &[&w]);
        st.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Tensor::scalar(0.5);
        let g = Tensor::scalar(3.0);
        let hyper = AdamHyper::with_lr(0.01);
        let mut st = AdamState::for_params(hyper, &[&w]);
        st.step(&mut [&mut w], &[&g]).unwrap();
        let expected = 0.5 - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((w.item() - expected).abs() < 1e-7);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // f(w) = (w - 5)^2, gradient 2(w - 5)
        let mut w = Tensor::scalar(0.0);
        let mut st = AdamState::for_params(AdamHyper::with_lr(0.1), &[&w]);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (w.item() - 5.0));
            st.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!((w.item() - 5.0).abs() < 0.5, "w = {}", w.item());
    }

    #[test]
    fn shape_mismatch() {
        let mut w = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::for_params(AdamHyper::default(), &[&w]);
        assert!(st.step(&mut [&mut w], &[&g]).is_err());
        assert_eq!(st.steps(), 0);
    }
}
