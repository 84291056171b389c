//! Losses on cosine logits with closed-form gradients.
//!
//! Every loss is expressed first on the cosine vector ([`CosineGrad`]) and
//! then chained through feature and proxy normalization
//! ([`LossHead::forward_backward`]). The one-vs-all family decomposes into
//! independent per-class terms; [`class_backward`] is the single place where
//! a class's contribution to the raw gradients is formed, and the sharded
//! classifier reuses it verbatim.

mod bias;
mod one_vs_all;
mod softmax;

pub use bias::{bias_init, bias_init_direct, bias_residual_at_zero, initial_logits};
pub use one_vs_all::{
    loss_ablation, loss_balanced, loss_curvature, loss_final, loss_naive, loss_variant, AblationFlags, OneVsAll,
};
pub use softmax::{loss_softmax, Softmax};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};
use crate::sphere::{proxy_cosine, ClassifierBank, CosineLogits, UnitFeature};

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value and its derivatives with respect to the cosines and the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineGrad {
    pub value: f64,
    pub d_cos: Vec<f64>,
    pub d_bias: f64,
}

/// Loss value with gradients for every raw parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub value: f64,
    pub d_cos: Vec<f64>,
    /// Row-major `K × D`, with respect to the unnormalized proxies.
    pub d_weights: Vec<f64>,
    /// With respect to the unnormalized feature.
    pub d_feature: Vec<f64>,
    pub d_bias: f64,
}

impl LossGradients {
    pub fn d_weight(&self, i: usize) -> &[f64] {
        let d = self.d_feature.len();
        &self.d_weights[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d_bias.is_finite()
            && self.d_cos.iter().all(|v| v.is_finite())
            && self.d_weights.iter().all(|v| v.is_finite())
            && self.d_feature.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(())
}

/// Chains `d_cos` for one class through both normalizations.
///
/// Writes `∂L/∂W_i = d_cos·(x̂ − c·Ŵ)/‖W‖` into `d_w` and adds
/// `d_cos·(Ŵ − c·x̂)/‖x‖` into the feature accumulator.
#[inline]
pub fn class_backward(
    feat: &UnitFeature,
    w: &[f64],
    w_norm: f64,
    cos: f64,
    d_cos: f64,
    d_w: &mut [f64],
    d_feat: &mut ExactVec,
) {
    let gw = d_cos / w_norm;
    let gx = d_cos / feat.norm;
    for k in 0..w.len() {
        let w_hat = w[k] / w_norm;
        let x_hat = feat.unit[k];
        d_w[k] = gw * (x_hat - cos * w_hat);
        d_feat.add_at(k, gx * (w_hat - cos * x_hat));
    }
}

/// A loss on cosine logits that can be evaluated end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossHead {
    OneVsAll(OneVsAll),
    Softmax(Softmax),
}

impl LossHead {
    /// Whether the shared bias participates (and should be trained).
    pub fn uses_bias(&self) -> bool {
        match self {
            LossHead::OneVsAll(h) => h.uses_bias,
            LossHead::Softmax(_) => false,
        }
    }

    pub fn eval_cos(&self, cos: &CosineLogits, y: usize, bias: f64) -> Result<CosineGrad> {
        match self {
            LossHead::OneVsAll(h) => h.eval(cos.values(), y, bias),
            LossHead::Softmax(h) => h.eval(cos.values(), y),
        }
    }

    /// Loss and gradients with respect to the raw feature, proxies and bias.
    pub fn forward_backward(&self, x: &[f64], bank: &ClassifierBank, y: usize) -> Result<LossGradients> {
        match self {
            LossHead::OneVsAll(h) => h.forward_backward(x, bank, y, None),
            LossHead::Softmax(h) => h.forward_backward(x, bank, y),
        }
    }
}

/// Cosines of `x` against every proxy plus the per-class norms.
pub(crate) fn all_cosines(feat: &UnitFeature, bank: &ClassifierBank) -> (Vec<f64>, Vec<f64>) {
    (0..bank.classes())
        .map(|i| proxy_cosine(&feat.unit, bank.weight(i)))
        .unzip()
}

/// Backpropagates a full `d_cos` vector through normalization.
pub(crate) fn chain_through_normalization(
    feat: &UnitFeature,
    bank: &ClassifierBank,
    cos: &[f64],
    norms: &[f64],
    cg: CosineGrad,
) -> LossGradients {
    let d = bank.dim();
    let mut d_weights = vec![0.0; bank.classes() * d];
    let mut d_feat = ExactVec::zeros(d);
    for i in 0..bank.classes() {
        class_backward(
            feat,
            bank.weight(i),
            norms[i],
            cos[i],
            cg.d_cos[i],
            &mut d_weights[i * d..(i + 1) * d],
            &mut d_feat,
        );
    }
    LossGradients {
        value: cg.value,
        d_cos: cg.d_cos,
        d_weights,
        d_feature: d_feat.values(),
        d_bias: cg.d_bias,
    }
}

pub(crate) fn exact_total(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    terms.into_iter().for_each(|t| acc.add(t));
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(-1.0) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-16);
    }

    #[test]
    fn sigmoid_symmetry() {
        for x in [-800.0, -3.0, 0.0, 2.5, 800.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
