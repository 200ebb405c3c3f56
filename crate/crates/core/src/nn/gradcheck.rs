use crate::error::{Error, Result};

/// A scalar loss of a flat parameter vector with a reverse-mode gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Objective from a pair of closures.
pub struct FnObjective<V, G> {
    pub value: V,
    pub grad: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok((self.value)(params))
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.value)(params), (self.grad)(params)))
    }
}

/// Reverse-mode gradient of `loss` at `params`.
pub fn grad(loss: &dyn Objective, params: &[f64]) -> Result<Vec<f64>> {
    let (value, g) = loss.value_and_grad(params)?;
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient computation"));
    }
    crate::error::check_dim("gradient", params.len(), g.len())?;
    Ok(g)
}

/// Max over coordinates of `|analytic - central| / (|analytic| + 1e-8)`.
pub fn finite_diff_check(loss: &dyn Objective, params: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = grad(loss, params)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = loss.value(&probe)?;
        probe[i] = params[i] - step;
        let minus = loss.value(&probe)?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let obj = FnObjective {
            value: |p: &[f64]| 0.5 * p.iter().map(|x| x * x).sum::<f64>(),
            grad: |p: &[f64]| p.to_vec(),
        };
        let p = [0.3, -1.5, 2.0];
        assert_eq!(grad(&obj, &p).unwrap(), p.to_vec());
        assert!(finite_diff_check(&obj, &p, 1e-5).unwrap() <= 1e-7);
    }

    #[test]
    fn constant_loss_has_zero_gradient_and_error() {
        let obj = FnObjective {
            value: |_: &[f64]| 4.2,
            grad: |p: &[f64]| vec![0.0; p.len()],
        };
        assert_eq!(grad(&obj, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(finite_diff_check(&obj, &[1.0, 2.0], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let obj = FnObjective {
            value: |p: &[f64]| p[0] * p[0],
            grad: |p: &[f64]| vec![p[0]],
        };
        assert!(finite_diff_check(&obj, &[1.0], 1e-5).unwrap() > 0.5);
        assert!(finite_diff_check(&obj, &[1.0], 0.0).is_err());
    }
}
