use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Result, Tensor, TensorError};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x));
        s
    }

    fn grad(g: f64) -> Gradients {
        let mut m = Gradients::new();
        m.insert("x".into(), Tensor::scalar(g));
        m
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.7);
        let mut opt = AdamState::default();
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamState::default();
        opt.step(&mut p, &grad(-3.5)).unwrap();
        let delta = p.get("x").unwrap().data()[0] - 1.0;
        assert!((delta - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_hand_computed_steps() {
        let mut p = scalar_store(0.5);
        let mut opt = AdamState::new(0.1);
        opt.step(&mut p, &grad(2.0)).unwrap();
        opt.step(&mut p, &grad(-1.0)).unwrap();
        // step 1: m=0.2, v=0.004, mhat=2, vhat=4 -> x = 0.5 - 0.1*2/(2+1e-8)
        let x1 = 0.5 - 0.1 * 2.0 / (2.0 + 1e-8);
        // step 2: m=0.18-0.1=0.08, v=0.003996+0.001=0.004996
        let m2: f64 = 0.9 * 0.2 - 0.1;
        let v2: f64 = 0.999 * 0.004 + 0.001 * 1.0;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64.powi(2));
        let x2 = x1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - x2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_store(0.5);
        let mut g = Gradients::new();
        g.insert("x".into(), Tensor::zeros(1, 2));
        assert!(AdamState::default().step(&mut p, &g).is_err());
    }
}
