use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

impl Adam {
    pub fn step<T: Scalar>(
        &self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut OptimizerState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.first.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] -= lr * (mh / (vh.sqrt() + eps) + wd * pd[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = Tensor::<f64>::from_f64([2], &[1.5, -2.0]).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new(&[&p]);
        let adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros([2])], &mut st).unwrap();
        }
        assert!(p.bit_eq(&before));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = OptimizerState::new(&[&p]);
        let adam = Adam {
            lr: 0.1,
            ..Adam::default()
        };
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn tensors_update_independently() {
        let adam = Adam {
            lr: 0.01,
            weight_decay: 0.1,
            ..Adam::default()
        };
        let g1 = [Tensor::<f64>::from_f64([2], &[0.5, -1.0]).unwrap(), Tensor::from_f64([1], &[3.0]).unwrap()];
        let mut a = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let mut b = Tensor::<f64>::from_f64([1], &[-1.0]).unwrap();
        let mut st = OptimizerState::new(&[&a, &b]);
        adam.step(&mut [&mut a, &mut b], &g1, &mut st).unwrap();
        adam.step(&mut [&mut a, &mut b], &g1, &mut st).unwrap();

        // per-element oracle, two steps with a constant gradient
        let oracle = |mut p: f64, g: f64| {
            let (mut m, mut v) = (0.0, 0.0);
            for t in 1..=2 {
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                p -= 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.1 * p);
            }
            p
        };
        assert!((a.data()[0] - oracle(1.0, 0.5)).abs() < 1e-14);
        assert!((a.data()[1] - oracle(2.0, -1.0)).abs() < 1e-14);
        assert!((b.data()[0] - oracle(-1.0, 3.0)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros([2]);
        let mut st = OptimizerState::new(&[&p]);
        let err = Adam::default().step(&mut [&mut p], &[Tensor::zeros([3])], &mut st);
        assert!(err.is_err());
    }
}
