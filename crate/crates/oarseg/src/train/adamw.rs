//! Decoupled weight-decay Adam.

use crate::blocks::{ParamId, ParamSet};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moment buffers plus the step counter.
pub struct OptimizerState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![T::ZERO; if e.trainable { e.tensor.numel() } else { 0 }])
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }

    /// One AdamW step over the supplied gradients. Weight decay applies
    /// only to entries registered with decay (not biases/norm affines).
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (_, g) in grads {
            g.ensure_finite("adamw gradient")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(BETA1);
        let b2 = T::from_f64(BETA2);
        let one_m_b1 = T::from_f64(1.0 - BETA1);
        let one_m_b2 = T::from_f64(1.0 - BETA2);
        let bc1 = T::from_f64(1.0 / (1.0 - BETA1.powi(t)));
        let bc2 = T::from_f64(1.0 / (1.0 - BETA2.powi(t)));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(EPSILON);

        // decay-only update for parameters without a gradient this step
        // is not applied: decoupled decay accompanies each gradient step
        for (id, g) in grads {
            let entry = params.get(*id);
            if !entry.trainable {
                continue;
            }
            let decay = entry.decay;
            let mut tensor = entry.tensor.clone();
            let data = tensor.values_mut();
            let gm = &mut self.m[id.0];
            let gv = &mut self.v[id.0];
            let gvals = g.values();
            let wd = T::from_f64(weight_decay);
            for i in 0..data.len() {
                let gi = gvals[i];
                gm[i] = b1 * gm[i] + one_m_b1 * gi;
                gv[i] = b2 * gv[i] + one_m_b2 * gi * gi;
                let mhat = gm[i] * bc1;
                let vhat = gv[i] * bc2;
                let mut p = data[i] - lr_t * (mhat / (vhat.sqrt() + eps));
                if decay {
                    p = p - lr_t * wd * data[i];
                }
                data[i] = p;
            }
            params.set_tensor(*id, tensor);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamBuilder;

    fn setup(p0: &[f64]) -> (ParamSet<f64>, ParamId) {
        let mut pb = ParamBuilder::<f64>::new(0);
        let id = pb.uniform_fan_in("w", &[p0.len()], 1);
        let mut params = pb.finish();
        params.set_tensor(id, Tensor::from_vec(&[p0.len()], p0.to_vec()).unwrap());
        (params, id)
    }

    #[test]
    fn zero_grad_fresh_state_is_pure_decay() {
        let (mut params, id) = setup(&[2.0, -3.0]);
        let mut opt = OptimizerState::new(&params);
        let g = Tensor::zeros(&[2]);
        opt.step(&mut params, &[(id, g)], 0.1, 0.05).unwrap();
        let expect = [2.0 * (1.0 - 0.1 * 0.05), -3.0 * (1.0 - 0.1 * 0.05)];
        for (a, e) in params.tensor(id).values().iter().zip(&expect) {
            assert_eq!(*a, *e);
        }
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        let (mut params, id) = setup(&[1.0]);
        let mut opt = OptimizerState::new(&params);
        let g = Tensor::from_vec(&[1], vec![0.37]).unwrap();
        let (lr, wd) = (0.01, 0.05);
        opt.step(&mut params, &[(id, g)], lr, wd).unwrap();
        let expect = 1.0 - lr * 1.0 - lr * wd * 1.0; // sign(g) = +1
        assert!((params.tensor(id).values()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn identical_histories_identical_trajectories() {
        let (mut pa, ia) = setup(&[0.5]);
        let (mut pb, ib) = setup(&[0.5]);
        let mut oa = OptimizerState::new(&pa);
        let mut ob = OptimizerState::new(&pb);
        for k in 0..10 {
            let g = Tensor::from_vec(&[1], vec![(k as f64 * 0.3).sin()]).unwrap();
            oa.step(&mut pa, &[(ia, g.clone())], 3e-4, 0.0).unwrap();
            ob.step(&mut pb, &[(ib, g)], 3e-4, 0.0).unwrap();
        }
        assert_eq!(pa.tensor(ia).values(), pb.tensor(ib).values());
    }

    #[test]
    fn non_finite_grad_rejected() {
        let (mut params, id) = setup(&[1.0]);
        let mut opt = OptimizerState::new(&params);
        let g = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(opt.step(&mut params, &[(id, g)], 1e-3, 0.0).is_err());
    }
}
