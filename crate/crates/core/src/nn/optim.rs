use super::mlp::{MlpParams, ParamGrads};
use crate::error::{FedError, Result};
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FedError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FedError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(grads: &ParamGrads<T>) -> Result<()> {
    for (l, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
        if !w.is_finite() {
            return Err(FedError::Numeric(format!("gradient of layer {l} weights")));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric(format!("gradient of layer {l} biases")));
        }
    }
    Ok(())
}

/// In-place update: `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
///
/// Nothing is modified when an error is returned.
pub fn sgd_step_in_place<T: Scalar>(
    params: &mut MlpParams<T>,
    grads: &ParamGrads<T>,
    momentum_state: &mut ParamGrads<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    if !grads.is_congruent(params) || !momentum_state.is_congruent(params) {
        return Err(FedError::dim(
            "sgd_step",
            format!("{:?}", params.layer_dims()),
            "incongruent gradient or momentum buffer",
        ));
    }
    check_finite(grads)?;
    let (lr, m, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(momentum_state.tensors_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = m * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Functional form of [`sgd_step_in_place`]: returns the updated parameters and
/// momentum buffer.
pub fn sgd_step<T: Scalar>(
    params: &MlpParams<T>,
    grads: &ParamGrads<T>,
    momentum_state: &ParamGrads<T>,
    cfg: &SgdConfig,
) -> Result<(MlpParams<T>, ParamGrads<T>)> {
    let mut p = params.clone();
    let mut v = momentum_state.clone();
    sgd_step_in_place(&mut p, grads, &mut v, cfg)?;
    Ok((p, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;

    fn scalar(v: f64) -> MlpParams<f64> {
        MlpParams::from_parts(vec![Matrix::from_vec(1, 1, vec![v]).unwrap()], vec![vec![0.0]])
            .unwrap()
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        ParamGrads {
            weights: vec![Matrix::from_vec(1, 1, vec![g]).unwrap()],
            biases: vec![vec![0.0]],
        }
    }

    #[test]
    fn plain_sgd_moves_by_lr_times_grad() {
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        let p = scalar(3.0);
        let (p2, _) = sgd_step(&p, &grad(2.0), &ParamGrads::zeros_like(&p), &cfg).unwrap();
        assert_eq!(p2.weights()[0].get(0, 0), 2.0);
    }

    #[test]
    fn zero_grad_is_a_fixed_point() {
        let cfg = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
        let p = MlpParams::<f64>::init(&[3, 4, 2], 3).unwrap();
        let zero = ParamGrads::zeros_like(&p);
        let (p2, v2) = sgd_step(&p, &zero, &zero, &cfg).unwrap();
        assert_eq!(p2, p);
        assert_eq!(v2, zero);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        let cfg = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 1e-5 };
        let p0 = scalar(1.5);
        let v0 = ParamGrads::zeros_like(&p0);
        let (p1, v1) = sgd_step(&p0, &grad(0.4), &v0, &cfg).unwrap();
        let (p2, _) = sgd_step(&p1, &grad(-0.2), &v1, &cfg).unwrap();

        let mut w = 1.5f64;
        let mut v = 0.0f64;
        for g in [0.4, -0.2] {
            v = 0.9 * v + (g + 1e-5 * w);
            w -= 0.01 * v;
        }
        assert!((p2.weights()[0].get(0, 0) - w).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_reported_with_layer() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let p = MlpParams::<f64>::init(&[2, 3, 2], 1).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.biases[1][0] = f64::NAN;
        let err = sgd_step(&p, &g, &ParamGrads::zeros_like(&p), &cfg).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value in gradient of layer 1 biases");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        for cfg in [
            SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 },
            SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 },
            SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: -1.0 },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
