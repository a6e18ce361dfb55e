use crate::nn::params::{AdaGradState, Gradients, Hyperparams, Params};
use crate::nn::NnError;
use crate::scalar::Scalar;

/// One regularised AdaGrad step, in place.
///
/// With `g = avg_grad + l2·θ + l1·sign(θ)` (where `sign(0) = 0`):
/// `acc += g²` and `θ -= lr·g / (sqrt(acc) + eps)`. The version advances by
/// one even when the step is zero. Non-finite gradients leave both
/// `params` and `state` untouched.
pub fn adagrad_update<S: Scalar>(
    params: &mut Params<S>,
    state: &mut AdaGradState<S>,
    avg_grad: &Gradients<S>,
    hyper: &Hyperparams,
) -> Result<(), NnError> {
    hyper.validate()?;
    if !params.layers.congruent(avg_grad) || !params.layers.congruent(&state.accumulators) {
        return Err(NnError::ParamLayout(
            "gradient, parameters and accumulators are not congruent".into(),
        ));
    }
    if let Some(index) = avg_grad.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient { index });
    }

    let lr = S::of(hyper.learning_rate);
    let l1 = S::of(hyper.l1_decay);
    let l2 = S::of(hyper.l2_decay);
    let eps = S::of(hyper.adagrad_eps);

    let mut next_params = params.layers.clone();
    let mut next_acc = state.accumulators.clone();
    for ((theta, acc), &g) in next_params
        .iter_mut()
        .zip(next_acc.iter_mut())
        .zip(avg_grad.iter())
    {
        let sign = if *theta > S::zero() {
            S::one()
        } else if *theta < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        let g = g + l2 * *theta + l1 * sign;
        *acc += g * g;
        *theta -= lr * g / (acc.sqrt() + eps);
    }
    if let Some(index) = next_params.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteGradient { index });
    }
    params.layers = next_params;
    params.version += 1;
    state.accumulators = next_acc;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{LayerParams, ParamSet};

    fn scalar_set(v: f64) -> ParamSet<f64> {
        ParamSet {
            layers: vec![LayerParams {
                weights: vec![v],
                biases: vec![],
            }],
        }
    }

    fn hyper(lr: f64) -> Hyperparams {
        Hyperparams {
            learning_rate: lr,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn zero_gradient_only_bumps_version() {
        let mut p = Params {
            version: 7,
            layers: scalar_set(0.25),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.0),
        };
        adagrad_update(&mut p, &mut s, &scalar_set(0.0), &hyper(0.1)).unwrap();
        assert_eq!(p.version, 8);
        assert_eq!(p.layers.layers[0].weights[0], 0.25);
        assert_eq!(s.accumulators.layers[0].weights[0], 0.0);
    }

    #[test]
    fn single_scalar_step_matches_formula() {
        let mut p = Params {
            version: 0,
            layers: scalar_set(0.0),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.0),
        };
        adagrad_update(&mut p, &mut s, &scalar_set(1.0), &hyper(0.1)).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert_eq!(p.layers.layers[0].weights[0], expected);
        assert_eq!(s.accumulators.layers[0].weights[0], 1.0);
    }

    #[test]
    fn repeated_gradient_shrinks_step() {
        let mut p = Params {
            version: 0,
            layers: scalar_set(0.0),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.0),
        };
        let g = scalar_set(1.0);
        adagrad_update(&mut p, &mut s, &g, &hyper(0.1)).unwrap();
        let first = p.layers.layers[0].weights[0];
        adagrad_update(&mut p, &mut s, &g, &hyper(0.1)).unwrap();
        let second = p.layers.layers[0].weights[0] - first;
        assert!(second.abs() < first.abs());
    }

    #[test]
    fn decay_terms_enter_the_gradient() {
        let mut p = Params {
            version: 0,
            layers: scalar_set(-2.0),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.0),
        };
        let h = Hyperparams {
            learning_rate: 0.5,
            l1_decay: 0.1,
            l2_decay: 0.3,
            ..Hyperparams::default()
        };
        adagrad_update(&mut p, &mut s, &scalar_set(0.2), &h).unwrap();
        let g: f64 = 0.2 + 0.3 * -2.0 - 0.1;
        assert_eq!(s.accumulators.layers[0].weights[0], g * g);
        assert_eq!(p.layers.layers[0].weights[0], -2.0 - 0.5 * g / ((g * g).sqrt() + 1e-8));
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = Params {
            version: 3,
            layers: scalar_set(1.0),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.5),
        };
        let err = adagrad_update(&mut p, &mut s, &scalar_set(f64::NAN), &hyper(0.1));
        assert!(matches!(err, Err(NnError::NonFiniteGradient { index: 0 })));
        assert_eq!(p.version, 3);
        assert_eq!(p.layers.layers[0].weights[0], 1.0);
        assert_eq!(s.accumulators.layers[0].weights[0], 0.5);
    }

    #[test]
    fn invalid_learning_rate_is_rejected() {
        let mut p = Params {
            version: 0,
            layers: scalar_set(1.0),
        };
        let mut s = AdaGradState {
            accumulators: scalar_set(0.0),
        };
        assert!(adagrad_update(&mut p, &mut s, &scalar_set(1.0), &hyper(0.0)).is_err());
    }
}
