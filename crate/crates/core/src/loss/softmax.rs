//! Scale-normalized softmax cross-entropy on cosines, the multi-class
//! baseline. Optional additive cosine margin on the target and optional
//! similarity adjustment of every cosine.

use serde::{Deserialize, Serialize};

use super::{all_cosines, chain_through_normalization, check_label, CosineGrad, LossGradients};
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::simadjust::{g, g_prime, AdjustExponent};
use crate::sphere::{ClassifierBank, CosineLogits, UnitFeature};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Softmax {
    pub scale: f64,
    pub margin: f64,
    /// Similarity adjustment exponent; 1 disables it.
    pub t: f64,
}

impl Softmax {
    pub fn new(scale: f64, margin: f64, t: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidHyperparams(format!("softmax scale must be > 0, got {scale}")));
        }
        if !margin.is_finite() {
            return Err(Error::InvalidHyperparams("softmax margin must be finite".into()));
        }
        AdjustExponent::new(t)?;
        Ok(Self { scale, margin, t })
    }

    fn exponent(&self) -> AdjustExponent {
        AdjustExponent::new(self.t).expect("validated exponent")
    }

    /// Scaled logits `s·(g(cos) − margin·[i = y])`.
    pub fn logits(&self, cos: &[f64], y: usize) -> Result<Vec<f64>> {
        let t = self.exponent();
        cos.iter()
            .enumerate()
            .map(|(i, &c)| {
                let m = if i == y { self.margin } else { 0.0 };
                Ok(self.scale * (g(c, t)? - m))
            })
            .collect()
    }

    /// Value and gradient given the global max and exp-sum of the logits.
    /// Split out so shards can apply it after the normalizer exchange.
    pub(crate) fn class_grad(&self, cos: f64, logit: f64, is_target: bool, max: f64, sum: f64) -> Result<f64> {
        let p = (logit - max).exp() / sum;
        let delta = if is_target { 1.0 } else { 0.0 };
        Ok(self.scale * (p - delta) * g_prime(cos, self.exponent())?)
    }

    pub fn eval(&self, cos: &[f64], y: usize) -> Result<CosineGrad> {
        check_label(y, cos.len())?;
        let z = self.logits(cos, y)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = ExactSum::new();
        z.iter().for_each(|&v| acc.add((v - max).exp()));
        let sum = acc.value();
        let value = sum.ln() + max - z[y];
        let d_cos = cos
            .iter()
            .zip(&z)
            .enumerate()
            .map(|(i, (&c, &zi))| self.class_grad(c, zi, i == y, max, sum))
            .collect::<Result<Vec<_>>>()?;
        Ok(CosineGrad { value, d_cos, d_bias: 0.0 })
    }

    pub fn forward_backward(&self, x: &[f64], bank: &ClassifierBank, y: usize) -> Result<LossGradients> {
        if x.len() != bank.dim() {
            return Err(Error::DimensionMismatch { expected: bank.dim(), got: x.len() });
        }
        check_label(y, bank.classes())?;
        let feat = UnitFeature::new(x)?;
        let (cos, norms) = all_cosines(&feat, bank);
        let cg = self.eval(&cos, y)?;
        Ok(chain_through_normalization(&feat, bank, &cos, &norms, cg))
    }
}

/// `−log softmax(s·(cos − margin·e_y))_y`.
pub fn loss_softmax(cos: &CosineLogits, y: usize, s: f64, margin: Option<f64>) -> Result<CosineGrad> {
    Softmax::new(s, margin.unwrap_or(0.0), 1.0)?.eval(cos.values(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> CosineLogits {
        CosineLogits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_logits_give_log_two() {
        for z in [-0.9, 0.0, 0.4, 1.0] {
            let out = loss_softmax(&logits(&[z, z]), 0, 30.0, None).unwrap();
            assert!((out.value - std::f64::consts::LN_2).abs() < 1e-14);
        }
    }

    #[test]
    fn easy_hard_sweep_is_monotone_and_scale_ordered() {
        let curve = |s: f64| -> Vec<f64> {
            (0..=40)
                .map(|k| {
                    let cy = -1.0 + k as f64 * 0.05;
                    loss_softmax(&logits(&[cy, 0.2, 0.2, 0.2]), 0, s, None).unwrap().value
                })
                .collect()
        };
        for s in [4.0, 8.0, 16.0] {
            let c = curve(s);
            assert!(c.windows(2).all(|w| w[1] < w[0]), "s={s}");
        }
        let hard = |s: f64| loss_softmax(&logits(&[-0.5, 0.2, 0.2, 0.2]), 0, s, None).unwrap().value;
        assert!(hard(16.0) > hard(4.0));
    }

    #[test]
    fn gradient_is_scaled_probability_residual() {
        let c = [0.3, -0.2, 0.5];
        let out = loss_softmax(&logits(&c), 2, 10.0, Some(0.35)).unwrap();
        let z = [3.0, -2.0, 10.0 * (0.5 - 0.35)];
        let m = z.iter().copied().fold(f64::MIN, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for i in 0..3 {
            let p = (z[i] - m).exp() / sum;
            let expect = 10.0 * (p - if i == 2 { 1.0 } else { 0.0 });
            assert!((out.d_cos[i] - expect).abs() < 1e-14);
        }
        assert!(out.d_cos.iter().sum::<f64>().abs() < 1e-13);
        assert!((out.value - (sum.ln() + m - z[2])).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(Softmax::new(0.0, 0.0, 1.0).is_err());
        assert!(loss_softmax(&logits(&[0.1]), 1, 4.0, None).is_err());
    }
}
