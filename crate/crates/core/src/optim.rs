//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new<'a>(hyper: AdamWHyper, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            hyper,
        }
    }

    /// One update of every parameter. `grads[i]` must exist and match the
    /// shape of `params[i]`; nothing is modified when any gradient is bad.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "expected {} parameters and gradients, got {} and {}",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(Error::Optimizer(format!("missing gradient for parameter {i}"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Optimizer(format!(
                        "gradient for parameter {i} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(_) => {}
            }
        }

        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let decay = 1.0 - h.learning_rate * h.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above").data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = h.beta1 * *mj + (1.0 - h.beta1) * gj;
                *vj = h.beta2 * *vj + (1.0 - h.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj *= decay;
                *pj -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_one(p0: f64, g0: f64, hyper: AdamWHyper) -> f64 {
        let mut p = Tensor::scalar(p0);
        let g = Tensor::scalar(g0);
        let mut state = AdamWState::new(hyper, [&p]);
        state.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(state.step_count, 1);
        p.item().unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let hyper = AdamWHyper {
            weight_decay: 0.0,
            ..AdamWHyper::default()
        };
        assert_eq!(run_one(0.37, 0.0, hyper), 0.37);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = AdamWHyper {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        // m̂ = 0.1 and √v̂ = 0.1 after bias correction
        let p = run_one(1.0, 0.1, hyper);
        assert!((p - (1.0 - 0.01 * 0.1 / (0.1 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.99).abs() < 1e-9);
    }

    #[test]
    fn decay_only_path_is_exact() {
        let hyper = AdamWHyper {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..AdamWHyper::default()
        };
        assert_eq!(run_one(1.0, 0.0, hyper), 1.0 - 0.001);
        assert_eq!(run_one(2.5, 0.0, hyper), 2.5 * (1.0 - 0.001));
    }

    #[test]
    fn missing_or_misshaped_gradient_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamWState::new(AdamWHyper::default(), [&p]);
        assert!(state.step(&mut [&mut p], &[None]).is_err());
        let wrong = Tensor::zeros(&[3]);
        assert!(state.step(&mut [&mut p], &[Some(&wrong)]).is_err());
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut grads = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - (9.0f64 + 9.0 + 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::full(&[1], 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }
}
