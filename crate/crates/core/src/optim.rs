//! Adam / AdamW and the parameter-wise moving average used between phases.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, AdamW only.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..Self::adam(learning_rate)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &ParamModel) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.dim())).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut ParamModel, grads: &Gradients) -> Result<()> {
        if grads.0.len() != model.params().len() {
            return Err(Error::shape(model.params().len(), grads.0.len()));
        }
        for (p, g) in model.params().iter().zip(&grads.0) {
            if p.dim() != g.dim() {
                return Err(Error::shape(format!("{:?}", p.dim()), format!("{:?}", g.dim())));
            }
        }
        grads.check_finite(model)?;
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if c.kind == OptimizerKind::AdamW && c.weight_decay != 0.0 {
                let keep = 1.0 - c.learning_rate * c.weight_decay;
                p.mapv_inplace(|x| x * keep);
            }
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            });
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteGradient("update produced non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Anchor/live pair for the between-phase moving average.
#[derive(Clone, Debug)]
pub struct EmaPair {
    pub anchor: ParamModel,
    pub live: ParamModel,
    pub eta: f64,
}

impl EmaPair {
    pub fn update(&self) -> Result<ParamModel> {
        ema_update(&self.anchor, &self.live, self.eta)
    }
}

/// `eta * anchor + (1 - eta) * live`, parameter-wise.
pub fn ema_update(anchor: &ParamModel, live: &ParamModel, eta: f64) -> Result<ParamModel> {
    if anchor.arch() != live.arch() {
        return Err(Error::DescriptorMismatch);
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config("ema.eta", "must lie in [0, 1]"));
    }
    let params = anchor
        .params()
        .iter()
        .zip(live.params())
        .map(|(a, l)| {
            let mut out = a.clone();
            ndarray::Zip::from(&mut out).and(l).for_each(|o, &l| {
                // Equal inputs must come back unchanged, which the blend alone does not round to.
                if *o != l {
                    *o = eta * *o + (1.0 - eta) * l;
                }
            });
            out
        })
        .collect();
    ParamModel::from_params(anchor.arch().clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture};
    use ndarray::array;

    fn scalar_model(w: f64) -> ParamModel {
        ParamModel::from_params(
            Architecture::mlp(1, &[], 1, Activation::Identity),
            vec![array![[w]], array![[0.0]]],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_adam_params_unchanged() {
        let mut m = scalar_model(0.7);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &m);
        let g = Gradients::zeros_like(&m);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.params()[0][[0, 0]], 0.7);
    }

    #[test]
    fn zero_gradient_adamw_only_decays() {
        let mut m = scalar_model(0.7);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.1), &m);
        let g = Gradients::zeros_like(&m);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.params()[0][[0, 0]], 0.7 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut m = scalar_model(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &m);
        let g = Gradients(vec![array![[1.0]], array![[0.0]]]);
        opt.step(&mut m, &g).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((m.params()[0][[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn identical_histories_give_identical_updates() {
        let arch = Architecture::mlp(2, &[], 1, Activation::Identity);
        let mut m = ParamModel::from_params(arch, vec![array![[0.5], [0.5]], array![[0.0]]]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.01), &m);
        for k in 0..5 {
            let g = k as f64 * 0.3 - 0.4;
            let grads = Gradients(vec![array![[g], [g]], array![[0.1]]]);
            opt.step(&mut m, &grads).unwrap();
        }
        assert_eq!(m.params()[0][[0, 0]], m.params()[0][[1, 0]]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = scalar_model(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &m);
        let g = Gradients(vec![array![[f64::INFINITY]], array![[0.0]]]);
        assert!(matches!(opt.step(&mut m, &g), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn ema_endpoints_and_scalar_case() {
        let (a, l) = (scalar_model(0.0), scalar_model(1.0));
        assert_eq!(ema_update(&a, &l, 1.0).unwrap(), a);
        assert_eq!(ema_update(&a, &l, 0.0).unwrap(), l);
        let mid = ema_update(&a, &l, 0.99).unwrap();
        assert!((mid.params()[0][[0, 0]] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ema_is_affine() {
        let (a, b, c, d) = (
            scalar_model(0.3),
            scalar_model(-1.2),
            scalar_model(2.5),
            scalar_model(0.9),
        );
        let eta = 0.99;
        let lhs =
            ema_update(&a, &b, eta).unwrap().params()[0][[0, 0]] + ema_update(&c, &d, eta).unwrap().params()[0][[0, 0]];
        let rhs = ema_update(&scalar_model(0.3 + 2.5), &scalar_model(-1.2 + 0.9), eta)
            .unwrap()
            .params()[0][[0, 0]];
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_mismatched_descriptors() {
        let a = scalar_model(0.0);
        let b = ParamModel::zeros(Architecture::mlp(2, &[], 1, Activation::Identity)).unwrap();
        assert!(matches!(ema_update(&a, &b, 0.5), Err(Error::DescriptorMismatch)));
    }
}
