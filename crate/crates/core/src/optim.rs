//! Parameter update rules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    /// Applies one update using the gradients in each parameter's grad slot,
    /// then clears the slots. Parameters without a gradient are left as is.
    pub fn step(&mut self, params: &mut Parameters) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        for (name, t) in params.iter_mut() {
            let Some(g) = t.take_grad() else { continue };
            let p = t.data_mut();
            if g.len() != p.len() {
                return Err(Error::shape(name, "gradient does not match parameter"));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    p.iter_mut().zip(&g).for_each(|(p, g)| *p -= lr * g);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first_moment.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second_moment.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    if m.len() != g.len() {
                        return Err(Error::shape(name, "moment buffer does not match parameter"));
                    }
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(value: f64, grad: Option<f64>) -> Parameters {
        let mut p = Parameters::new();
        let mut t = Tensor::from_vec(vec![value]);
        if let Some(g) = grad {
            t.set_grad(vec![g]).unwrap();
        }
        p.insert("p", t);
        p
    }

    fn value(p: &Parameters) -> f64 {
        p.get("p").unwrap().data()[0]
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0, Some(1.0));
        OptimizerState::sgd(0.1).unwrap().step(&mut p).unwrap();
        assert_eq!(value(&p), 0.9);
        assert!(p.get("p").unwrap().grad().is_none());
    }

    #[test]
    fn zero_or_missing_gradient_leaves_parameter() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            let mut p = one(1.5, Some(0.0));
            opt.step(&mut p).unwrap();
            assert_eq!(value(&p), 1.5);
            let mut p = one(1.5, None);
            opt.step(&mut p).unwrap();
            assert_eq!(value(&p), 1.5);
        }
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.01, 0.9, 0.999, 1e-8);
        let mut opt = OptimizerState::adam(lr).unwrap();
        let mut p = one(1.0, Some(0.5));
        opt.step(&mut p).unwrap();
        // Bias correction makes the first step lr · g / (|g| + eps).
        let first = 1.0 - lr * 0.5 / (0.5 + eps);
        assert!((value(&p) - first).abs() < 1e-15);

        p.get_mut("p").unwrap().set_grad(vec![-0.2]).unwrap();
        opt.step(&mut p).unwrap();
        let m = b1 * (1.0 - b1) * 0.5 + (1.0 - b1) * -0.2;
        let v = b2 * (1.0 - b2) * 0.25 + (1.0 - b2) * 0.04;
        let m_hat = m / (1.0 - b1 * b1);
        let v_hat = v / (1.0 - b2 * b2);
        let second = first - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((value(&p) - second).abs() < 1e-15);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn rejects_bad_rates_and_gradients() {
        assert!(OptimizerState::sgd(0.0).is_err());
        assert!(OptimizerState::adam(f64::NAN).is_err());
        let mut p = one(1.0, Some(f64::INFINITY));
        assert!(matches!(OptimizerState::sgd(0.1).unwrap().step(&mut p), Err(Error::NonFinite(_))));
        assert_eq!(value(&p), 1.0);
    }
}
