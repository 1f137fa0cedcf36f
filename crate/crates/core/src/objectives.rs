//! Training objectives and the 2D pose critic.
//!
//! All losses take `[batch, features]` rows in network units and reduce by
//! the mean over features, then over the batch.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, ParamModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Gradient penalty weight.
    pub alpha: f64,
    /// Adversarial weight in the generator objective.
    pub beta: f64,
    /// Adversarial weight in the estimator/discriminator objective.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.35,
            beta: 2.5,
            gamma: 2.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// `E[(||grad|| - 1)^2]`
    #[default]
    StandardGp,
    /// `E[1 - ||grad||]`
    AsWritten,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub penalty: PenaltyMode,
    /// Use `E[D(x~)] - E[D(x)]` as the critic gap instead of the reverse.
    pub swap_critic_sign: bool,
    /// How the critic term of `L_DP` reaches the estimator.
    pub estimator_critic: EstimatorCritic,
}

/// Gradient path from the critic term of `L_DP` into the estimator. The
/// discriminator always receives the full `gamma * L_dis` gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorCritic {
    /// The estimator only learns from `L_2D`.
    #[default]
    None,
    /// Same gradient as the discriminator: both minimise `L_dis`.
    Literal,
    /// The estimator maximises the critic gap, like the generators.
    Adversarial,
}

/// Critic architecture over flattened 2D poses.
pub fn discriminator_arch(input: usize) -> Architecture {
    Architecture::mlp(input, &[64, 64], 1, Activation::LeakyRelu)
}

fn same_shape(a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::SkeletonMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `MSE(y, y~) + mean_b |1 - exp(mean |y - y~|)|`.
pub fn loss_3d<'t>(y_hat: Var<'t>, y_tilde: Var<'t>) -> Result<Var<'t>> {
    same_shape(y_hat, y_tilde)?;
    let d = y_hat.sub(y_tilde);
    let mse = d.square().mean();
    let l1 = d.abs().mean_rows();
    let feedback = l1.exp().scale(-1.0).add_scalar(1.0).abs().mean();
    Ok(mse.add(feedback))
}

/// `MSE(x, x~) + mean |x/||x|| - x~/||x~|||` with per-sample Frobenius norms.
pub fn loss_2d<'t>(x: Var<'t>, x_tilde: Var<'t>) -> Result<Var<'t>> {
    same_shape(x, x_tilde)?;
    let unit = |v: Var<'t>| -> Result<Var<'t>> {
        let n = v.square().sum_rows().sqrt();
        if n.value().iter().any(|&n| !(n > 0.0)) {
            return Err(Error::ZeroNormPose);
        }
        Ok(v.mul_col(n.safe_recip()))
    };
    let mse = x.sub(x_tilde).square().mean();
    let shape_term = unit(x)?.sub(unit(x_tilde)?).abs().mean();
    Ok(mse.add(shape_term))
}

/// One interpolation coefficient per batch element, uniform on `[0, 1)`.
pub fn draw_interpolation(rng: &mut impl Rng, batch: usize) -> Tensor {
    Array2::from_shape_fn((batch, 1), |_| rng.random::<f64>())
}

/// Parts of the critic objective.
#[derive(Clone, Copy, Debug)]
pub struct DisTerms<'t> {
    pub gap: Var<'t>,
    pub penalty: Var<'t>,
    pub total: Var<'t>,
}

/// `E[D(x)] - E[D(x~)]`, or its negation under `swap_critic_sign`.
pub fn critic_gap<'t>(
    x: Var<'t>,
    x_tilde: Var<'t>,
    critic: &ParamModel,
    critic_params: &[Var<'t>],
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    let real = critic.apply(critic_params, x)?.mean();
    let fake = critic.apply(critic_params, x_tilde)?.mean();
    Ok(if cfg.swap_critic_sign {
        fake.sub(real)
    } else {
        real.sub(fake)
    })
}

/// Critic objective: gap plus `alpha` times the gradient penalty at
/// `k = eps x + (1 - eps) x~`. The penalty is differentiable in the critic
/// parameters and in both pose batches.
pub fn loss_dis<'t>(
    x: Var<'t>,
    x_tilde: Var<'t>,
    critic: &ParamModel,
    critic_params: &[Var<'t>],
    eps: &Tensor,
    cfg: &ObjectiveConfig,
) -> Result<DisTerms<'t>> {
    same_shape(x, x_tilde)?;
    let tape = x.tape();
    let rows = x.shape().0;
    if eps.dim() != (rows, 1) {
        return Err(Error::shape(format!("[{rows}, 1]"), format!("{:?}", eps.dim())));
    }
    let gap = critic_gap(x, x_tilde, critic, critic_params, cfg)?;
    let e = tape.constant(eps.clone());
    let k = x_tilde.add(x.sub(x_tilde).mul_col(e)).track();
    let score = critic.apply(critic_params, k)?.sum();
    let grad = tape.grad(score, &[k])[0];
    let norms = grad.square().sum_rows().sqrt();
    let penalty = match cfg.penalty {
        PenaltyMode::StandardGp => norms.add_scalar(-1.0).square().mean(),
        PenaltyMode::AsWritten => norms.scale(-1.0).add_scalar(1.0).mean(),
    };
    let total = gap.add(penalty.scale(cfg.weights.alpha));
    Ok(DisTerms { gap, penalty, total })
}

/// `L_3D - beta * L_dis`.
pub fn loss_generator<'t>(l3d: Var<'t>, ldis: Var<'t>, w: &LossWeights) -> Var<'t> {
    l3d.sub(ldis.scale(w.beta))
}

/// `L_2D + gamma * L_dis`.
pub fn loss_estimator_discriminator<'t>(l2d: Var<'t>, ldis: Var<'t>, w: &LossWeights) -> Var<'t> {
    l2d.add(ldis.scale(w.gamma))
}

fn rows(values: &[Vec<f64>]) -> Result<Tensor> {
    let width = values.first().map_or(0, Vec::len);
    if values.is_empty() || values.iter().any(|r| r.len() != width) {
        return Err(Error::shape("non-empty rows of equal width", "ragged batch"));
    }
    Ok(Tensor::from_shape_vec((values.len(), width), values.concat()).unwrap())
}

/// Plain-value [`loss_3d`] over a batch of flattened poses.
pub fn loss_3d_value(y_hat: &[Vec<f64>], y_tilde: &[Vec<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(rows(y_hat)?), tape.constant(rows(y_tilde)?));
    Ok(loss_3d(a, b)?.item())
}

/// Plain-value [`loss_2d`] over a batch of flattened poses.
pub fn loss_2d_value(x: &[Vec<f64>], x_tilde: &[Vec<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(rows(x)?), tape.constant(rows(x_tilde)?));
    Ok(loss_2d(a, b)?.item())
}

/// Plain-value [`loss_dis`] with interpolation coefficients from `rng`.
pub fn loss_dis_value(
    x: &[Vec<f64>],
    x_tilde: &[Vec<f64>],
    critic: &ParamModel,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(rows(x)?), tape.constant(rows(x_tilde)?));
    let eps = draw_interpolation(rng, x.len());
    let p = critic.bind_frozen(&tape);
    Ok(loss_dis(a, b, critic, &p, &eps, cfg)?.total.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..w).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    fn constant_critic(c: f64) -> ParamModel {
        let mut m = ParamModel::zeros(discriminator_arch(4)).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 1][[0, 0]] = c;
        m
    }

    fn linear_critic(w: &[f64]) -> ParamModel {
        let arch = Architecture::mlp(w.len(), &[], 1, Activation::Identity);
        let wt = Tensor::from_shape_vec((w.len(), 1), w.to_vec()).unwrap();
        ParamModel::from_params(arch, vec![wt, Tensor::zeros((1, 1))]).unwrap()
    }

    #[test]
    fn loss_3d_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = batch(&mut rng, 4, 48);
        assert_eq!(loss_3d_value(&a, &a).unwrap(), 0.0);
        let d = std::f64::consts::LN_2;
        let y = vec![vec![0.0; 6]];
        let t = vec![vec![d; 6]];
        let v = loss_3d_value(&y, &t).unwrap();
        assert!((v - (d * d + 1.0)).abs() < 1e-12);
        let b = batch(&mut rng, 4, 48);
        assert!((loss_3d_value(&a, &b).unwrap() - loss_3d_value(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_2d_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = batch(&mut rng, 3, 32);
        assert_eq!(loss_2d_value(&x, &x).unwrap(), 0.0);
        let x2: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let mse: f64 = x.iter().flatten().map(|v| v * v).sum::<f64>() / 96.0;
        assert!((loss_2d_value(&x, &x2).unwrap() - mse).abs() < 1e-12);

        let y = batch(&mut rng, 3, 32);
        let mut mse = 0.0;
        let mut shape = 0.0;
        for (a, b) in x.iter().zip(&y) {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (p, q) in a.iter().zip(b) {
                mse += (p - q).powi(2);
                shape += (p / na - q / nb).abs();
            }
        }
        let expected = mse / 96.0 + shape / 96.0;
        assert!((loss_2d_value(&x, &y).unwrap() - expected).abs() < 1e-12);
        let zero = vec![vec![0.0; 32]; 3];
        assert!(matches!(loss_2d_value(&x, &zero), Err(Error::ZeroNormPose)));
    }

    #[test]
    fn constant_critic_as_written_is_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ObjectiveConfig {
            penalty: PenaltyMode::AsWritten,
            ..Default::default()
        };
        let (x, xt) = (batch(&mut rng, 8, 4), batch(&mut rng, 8, 4));
        let v = loss_dis_value(&x, &xt, &constant_critic(1.7), &cfg, &mut rng).unwrap();
        assert_eq!(v, 0.35);
    }

    #[test]
    fn unit_linear_critic_has_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = [0.6, 0.0, -0.8, 0.0];
        let critic = linear_critic(&w);
        let (x, xt) = (batch(&mut rng, 8, 4), batch(&mut rng, 8, 4));
        let mut expected = 0.0;
        for (a, b) in x.iter().zip(&xt) {
            for k in 0..4 {
                expected += w[k] * (a[k] - b[k]) / 8.0;
            }
        }
        for penalty in [PenaltyMode::StandardGp, PenaltyMode::AsWritten] {
            let cfg = ObjectiveConfig {
                penalty,
                ..Default::default()
            };
            let v = loss_dis_value(&x, &xt, &critic, &cfg, &mut rng).unwrap();
            assert!((v - expected).abs() < 1e-12, "{penalty:?}");
        }
        let swapped = ObjectiveConfig {
            swap_critic_sign: true,
            ..Default::default()
        };
        let v = loss_dis_value(&x, &xt, &critic, &swapped, &mut rng).unwrap();
        assert!((v + expected).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoint() {
        // With eps = 1 the penalty is evaluated at x itself.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = ParamModel::init(discriminator_arch(4), &mut rng).unwrap();
        let (x, xt) = (batch(&mut rng, 5, 4), batch(&mut rng, 5, 4));
        let cfg = ObjectiveConfig::default();
        let tape = Tape::new();
        let p = critic.bind_frozen(&tape);
        let (a, b) = (tape.constant(rows(&x).unwrap()), tape.constant(rows(&xt).unwrap()));
        let at_one = loss_dis(a, b, &critic, &p, &Tensor::ones((5, 1)), &cfg).unwrap();
        let at_x = loss_dis(a, a, &critic, &p, &Tensor::zeros((5, 1)), &cfg).unwrap();
        assert_eq!(at_one.penalty.item(), at_x.penalty.item());
    }

    #[test]
    fn weighted_combinations() {
        let tape = Tape::new();
        let (l3, ld, l2) = (tape.scalar(0.4), tape.scalar(-0.3), tape.scalar(0.2));
        let zero = LossWeights {
            alpha: 0.35,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(loss_generator(l3, ld, &zero).item(), 0.4);
        assert_eq!(loss_estimator_discriminator(l2, ld, &zero).item(), 0.2);
        let w = LossWeights::default();
        assert!((loss_generator(l3, ld, &w).item() - (0.4 + 2.5 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (a, b) = (batch(&mut rng, 3, 12), batch(&mut rng, 3, 12));
            assert!(loss_3d_value(&a, &b).unwrap() >= 0.0);
            assert!(loss_2d_value(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let critic = ParamModel::init(Architecture::mlp(4, &[5], 1, Activation::Tanh), &mut rng).unwrap();
        let (x, xt) = (
            rows(&batch(&mut rng, 3, 4)).unwrap(),
            rows(&batch(&mut rng, 3, 4)).unwrap(),
        );
        let eps = draw_interpolation(&mut rng, 3);
        for penalty in [PenaltyMode::StandardGp, PenaltyMode::AsWritten] {
            let cfg = ObjectiveConfig {
                penalty,
                ..Default::default()
            };
            let report = check_gradients(&[&critic], 1e-5, |tape, p| {
                let t = loss_dis(
                    tape.constant(x.clone()),
                    tape.constant(xt.clone()),
                    &critic,
                    &p[0],
                    &eps,
                    &cfg,
                )?;
                Ok(t.total)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{penalty:?} {report:?}");
        }
    }
}
