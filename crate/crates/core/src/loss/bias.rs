//! Initial value of the shared bias.
//!
//! At initialization every cosine is close to zero, so the positive and
//! negative logits are the constants `a_y + b` and `a_i + b`. Setting
//! `∂L/∂b = 0` gives a quadratic in `e^b` with `z = w_p / (w_n (K − 1))`:
//!
//! ```text
//! e^{a_y}·e^{2b} + (1 − z)·e^b − z·e^{−a_i} = 0
//! ```
//!
//! whose positive root can be written two ways. Each has a cancellation in
//! one regime (`z > 1` or `z < 1`), so [`bias_init`] picks the form that is
//! cancellation-free for the given `z`.

use super::{sigmoid, OneVsAll};
use crate::error::{Error, Result};
use crate::simadjust::g;
use crate::sphere::Hyperparams;

/// `(a_y, a_i)`: the positive and negative logits, without bias, at cos θ = 0.
pub fn initial_logits(head: &OneVsAll) -> Result<(f64, f64)> {
    let t = crate::simadjust::AdjustExponent::new(head.t)?;
    let g0 = g(0.0, t)?;
    let a_y = head.scale * (g0 + head.positive_shift(0.0)?);
    let a_i = head.scale * (g0 + head.m_n);
    Ok((a_y, a_i))
}

fn ratio(head: &OneVsAll, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::InvalidHyperparams(format!("bias init needs K >= 2, got {classes}")));
    }
    if !(head.pos_weight > 0.0 && head.neg_weight > 0.0) {
        return Err(Error::InvalidHyperparams(
            "bias init needs both positive and negative weights strictly positive".into(),
        ));
    }
    Ok(head.pos_weight / (head.neg_weight * (classes - 1) as f64))
}

impl OneVsAll {
    /// Bias that zeroes `∂L/∂b` when every cosine is 0.
    pub fn initial_bias(&self, classes: usize) -> Result<f64> {
        let z = ratio(self, classes)?;
        let (a_y, a_i) = initial_logits(self)?;
        // 1 − z from the weights directly; `1.0 - z` is too coarse when z ≈ 1
        // and the discriminant is tiny.
        let den = self.neg_weight * (classes - 1) as f64;
        let one_minus_z = self.neg_weight.mul_add((classes - 1) as f64, -self.pos_weight) / den;
        let q = 4.0 * z * (a_y - a_i).exp();
        let disc = (one_minus_z.powi(2) + q).sqrt();
        if one_minus_z >= 0.0 {
            Ok((2.0 * z).ln() - a_i - (one_minus_z + disc).ln())
        } else {
            Ok((disc - one_minus_z).ln() - std::f64::consts::LN_2 - a_y)
        }
    }

    /// `∂L/∂b` with every cosine equal to 0.
    pub fn bias_residual_at_zero(&self, classes: usize, b: f64) -> Result<f64> {
        let (a_y, a_i) = initial_logits(self)?;
        let r = self.scale;
        Ok(-self.pos_weight / r * sigmoid(-(a_y + b))
            + self.neg_weight / r * (classes.saturating_sub(1)) as f64 * sigmoid(a_i + b))
    }
}

pub fn bias_init(hp: &Hyperparams, classes: usize) -> Result<f64> {
    if !(hp.lambda > 0.0 && hp.lambda < 1.0) {
        return Err(Error::InvalidHyperparams(format!("bias init needs lambda in (0,1), got {}", hp.lambda)));
    }
    OneVsAll::sphereface2(hp)?.initial_bias(classes)
}

/// The root written directly as `log(−(1−z) + √…) − log 2 − a_y`, which
/// loses precision when `z < 1` and `e^{a_y − a_i}` is tiny.
pub fn bias_init_direct(hp: &Hyperparams, classes: usize) -> Result<f64> {
    let head = OneVsAll::sphereface2(hp)?;
    let z = ratio(&head, classes)?;
    let (a_y, a_i) = initial_logits(&head)?;
    let disc = ((1.0 - z).powi(2) + 4.0 * z * (a_y - a_i).exp()).sqrt();
    Ok((-(1.0 - z) + disc).ln() - std::f64::consts::LN_2 - a_y)
}

pub fn bias_residual_at_zero(hp: &Hyperparams, classes: usize, b: f64) -> Result<f64> {
    OneVsAll::sphereface2(hp)?.bias_residual_at_zero(classes, b)
}
