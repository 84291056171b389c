//! The one-vs-all loss family: `K` independent binary logistic terms on
//! (optionally adjusted) cosines, with positive/negative weighting, a
//! curvature scale, angular margins and a shared bias.
//!
//! With positive logit `u` and negative logits `v_i`
//!
//! ```text
//! L = (w_p / r)·softplus(−u) + (w_n / r)·Σ_{i≠y} softplus(v_i)
//! u   = r·(g(cos θ_y) + δ) + b        δ = −m_p, or the detached angular shift
//! v_i = r·(g(cos θ_i) + m_n) + b
//! ```
//!
//! The naive, balanced and curvature losses are the special cases
//! `(w_p, w_n, r) = (1, 1, 1)`, `(λ, 1−λ, 1)` and `(λ, 1−λ, r)` with no margin,
//! no bias and `t = 1`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{
    all_cosines, chain_through_normalization, check_label, exact_total, sigmoid, softplus, CosineGrad,
    LossGradients,
};
use crate::error::{Error, Result};
use crate::simadjust::{g, g_prime, AdjustExponent};
use crate::sphere::{ClassifierBank, CosineLogits, Hyperparams, MarginVariant, UnitFeature};

/// Clamp applied to cosines before `acos` in the angular-margin variants.
pub const ACOS_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsAll {
    pub pos_weight: f64,
    pub neg_weight: f64,
    pub scale: f64,
    pub m_p: f64,
    pub m_n: f64,
    pub t: f64,
    pub variant: MarginVariant,
    pub uses_bias: bool,
}

impl OneVsAll {
    pub fn naive() -> Self {
        Self {
            pos_weight: 1.0,
            neg_weight: 1.0,
            scale: 1.0,
            m_p: 0.0,
            m_n: 0.0,
            t: 1.0,
            variant: MarginVariant::CosineAdditive,
            uses_bias: false,
        }
    }

    pub fn balanced(lambda: f64) -> Result<Self> {
        Self::curvature(lambda, 1.0)
    }

    pub fn curvature(lambda: f64, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidHyperparams(format!("need lambda in [0,1] and r > 0, got ({lambda}, {r})")));
        }
        Ok(Self {
            pos_weight: lambda,
            neg_weight: 1.0 - lambda,
            scale: r,
            ..Self::naive()
        })
    }

    /// The complete loss with margin, shared bias and similarity adjustment.
    pub fn sphereface2(hp: &Hyperparams) -> Result<Self> {
        hp.validate()?;
        let m_n = match hp.margin_variant {
            MarginVariant::CosineAdditive => hp.m_n,
            _ => 0.0,
        };
        Ok(Self {
            pos_weight: hp.lambda,
            neg_weight: 1.0 - hp.lambda,
            scale: hp.r,
            m_p: hp.m_p,
            m_n,
            t: hp.t,
            variant: hp.margin_variant,
            uses_bias: true,
        })
    }

    /// The loss corresponding to a row of the design-principle ablation.
    pub fn from_flags(flags: AblationFlags, hp: &Hyperparams) -> Result<Self> {
        flags.validate()?;
        hp.validate()?;
        let mut head = if flags.am {
            Self::sphereface2(hp)?
        } else {
            Self::naive()
        };
        if flags.pn {
            head.pos_weight = hp.lambda;
            head.neg_weight = 1.0 - hp.lambda;
        } else {
            head.pos_weight = 1.0;
            head.neg_weight = 1.0;
        }
        head.scale = if flags.eh { hp.r } else { 1.0 };
        head.t = if flags.sa { hp.t } else { 1.0 };
        Ok(head)
    }

    fn exponent(&self) -> AdjustExponent {
        AdjustExponent::new(self.t).expect("validated exponent")
    }

    fn bias_term(&self, b: f64) -> f64 {
        if self.uses_bias {
            b
        } else {
            0.0
        }
    }

    /// Offset added to `g(cos θ_y)` in the positive logit. For the angular
    /// variants this is the margin-induced shift that backward treats as a
    /// constant.
    pub fn positive_shift(&self, cos_y: f64) -> Result<f64> {
        let t = self.exponent();
        match self.variant {
            MarginVariant::CosineAdditive => Ok(-self.m_p),
            MarginVariant::ArcAdditive | MarginVariant::Multiplicative => {
                let c = cos_y.clamp(-1.0 + ACOS_GUARD, 1.0 - ACOS_GUARD);
                let theta = c.acos();
                let shifted = match self.variant {
                    MarginVariant::ArcAdditive => (theta + self.m_p).min(PI),
                    _ => self.m_p.min(PI / theta) * theta,
                };
                Ok(g(shifted.cos(), t)? - g(c, t)?)
            }
        }
    }

    /// The positive logit `u` (for the target) or a negative logit `v`.
    pub fn logit(&self, cos: f64, is_target: bool, b: f64, shift: f64) -> Result<f64> {
        let gz = g(cos, self.exponent())?;
        let offset = if is_target { shift } else { self.m_n };
        Ok(self.scale * (gz + offset) + self.bias_term(b))
    }

    /// Contribution of one class: `(loss term, ∂/∂cos, ∂/∂b)`.
    ///
    /// Depends only on this class's cosine, which is what makes the
    /// classifier layer decomposable across shards.
    #[inline]
    pub fn class_term(&self, cos: f64, is_target: bool, b: f64, shift: f64) -> Result<(f64, f64, f64)> {
        let t = self.exponent();
        let r = self.scale;
        let b = self.bias_term(b);
        let gz = g(cos, t)?;
        let gp = g_prime(cos, t)?;
        let (value, d_cos, d_bias) = if is_target {
            let u = r * (gz + shift) + b;
            let s = sigmoid(-u);
            (self.pos_weight / r * softplus(-u), -self.pos_weight * s * gp, -self.pos_weight / r * s)
        } else {
            let v = r * (gz + self.m_n) + b;
            let s = sigmoid(v);
            (self.neg_weight / r * softplus(v), self.neg_weight * s * gp, self.neg_weight / r * s)
        };
        Ok((value, d_cos, if self.uses_bias { d_bias } else { 0.0 }))
    }

    /// Evaluates with an externally supplied positive shift. Passing the
    /// shift computed at a fixed point gives the frozen-shift functional whose
    /// true derivative equals the detached analytic gradient.
    pub fn eval_with_shift(&self, cos: &[f64], y: usize, b: f64, shift: f64) -> Result<CosineGrad> {
        check_label(y, cos.len())?;
        let terms = cos
            .iter()
            .enumerate()
            .map(|(i, &c)| self.class_term(c, i == y, b, shift))
            .collect::<Result<Vec<_>>>()?;
        Ok(CosineGrad {
            value: exact_total(terms.iter().map(|t| t.0)),
            d_cos: terms.iter().map(|t| t.1).collect(),
            d_bias: exact_total(terms.iter().map(|t| t.2)),
        })
    }

    pub fn eval(&self, cos: &[f64], y: usize, b: f64) -> Result<CosineGrad> {
        check_label(y, cos.len())?;
        let shift = self.positive_shift(cos[y])?;
        self.eval_with_shift(cos, y, b, shift)
    }

    /// End-to-end loss; `frozen_shift` overrides the positive shift.
    pub fn forward_backward(
        &self,
        x: &[f64],
        bank: &ClassifierBank,
        y: usize,
        frozen_shift: Option<f64>,
    ) -> Result<LossGradients> {
        if x.len() != bank.dim() {
            return Err(Error::DimensionMismatch { expected: bank.dim(), got: x.len() });
        }
        check_label(y, bank.classes())?;
        let feat = UnitFeature::new(x)?;
        let (cos, norms) = all_cosines(&feat, bank);
        let shift = match frozen_shift {
            Some(s) => s,
            None => self.positive_shift(cos[y])?,
        };
        let cg = self.eval_with_shift(&cos, y, bank.bias, shift)?;
        Ok(chain_through_normalization(&feat, bank, &cos, &norms, cg))
    }
}

/// Which design principles are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Positive/negative balance.
    pub pn: bool,
    /// Easy/hard mining through the curvature scale.
    pub eh: bool,
    /// Angular margin plus shared bias.
    pub am: bool,
    /// Similarity adjustment.
    pub sa: bool,
}

impl AblationFlags {
    pub const NONE: Self = Self { pn: false, eh: false, am: false, sa: false };
    pub const PN: Self = Self { pn: true, ..Self::NONE };
    pub const PN_EH: Self = Self { eh: true, ..Self::PN };
    pub const PN_EH_AM: Self = Self { am: true, ..Self::PN_EH };
    pub const ALL: Self = Self { sa: true, ..Self::PN_EH_AM };

    /// The five cumulative ablation rows in order.
    pub fn ladder() -> [Self; 5] {
        [Self::NONE, Self::PN, Self::PN_EH, Self::PN_EH_AM, Self::ALL]
    }

    pub fn validate(&self) -> Result<()> {
        if self.am && !self.eh {
            return Err(Error::InvalidFlags("angular margin requires easy/hard scaling".into()));
        }
        if self.sa && !self.am {
            return Err(Error::InvalidFlags("similarity adjustment requires angular margin".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.pn, "PN"), (self.eh, "EH"), (self.am, "AM"), (self.sa, "SA")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for AblationFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Self::NONE;
        if s == "none" || s.is_empty() {
            return Ok(f);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "PN" => f.pn = true,
                "EH" => f.eh = true,
                "AM" => f.am = true,
                "SA" => f.sa = true,
                other => return Err(Error::InvalidFlags(format!("unknown flag '{other}'"))),
            }
        }
        f.validate()?;
        Ok(f)
    }
}

/// `softplus(−cos θ_y) + Σ_{i≠y} softplus(cos θ_i)`.
pub fn loss_naive(cos: &CosineLogits, y: usize) -> Result<f64> {
    Ok(OneVsAll::naive().eval(cos.values(), y, 0.0)?.value)
}

pub fn loss_balanced(cos: &CosineLogits, y: usize, lambda: f64) -> Result<f64> {
    Ok(OneVsAll::balanced(lambda)?.eval(cos.values(), y, 0.0)?.value)
}

pub fn loss_curvature(cos: &CosineLogits, y: usize, lambda: f64, r: f64) -> Result<f64> {
    Ok(OneVsAll::curvature(lambda, r)?.eval(cos.values(), y, 0.0)?.value)
}

/// The complete loss for any margin variant in `hp`.
pub fn loss_final(cos: &CosineLogits, y: usize, hp: &Hyperparams, b: f64) -> Result<CosineGrad> {
    OneVsAll::sphereface2(hp)?.eval(cos.values(), y, b)
}

/// The angular-margin variants (arc-additive, multiplicative) only.
pub fn loss_variant(cos: &CosineLogits, y: usize, hp: &Hyperparams, b: f64) -> Result<CosineGrad> {
    if hp.margin_variant == MarginVariant::CosineAdditive {
        return Err(Error::InvalidHyperparams("loss_variant expects an angular margin variant".into()));
    }
    loss_final(cos, y, hp, b)
}

pub fn loss_ablation(
    cos: &CosineLogits,
    y: usize,
    flags: AblationFlags,
    hp: &Hyperparams,
    b: f64,
) -> Result<CosineGrad> {
    OneVsAll::from_flags(flags, hp)?.eval(cos.values(), y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> CosineLogits {
        CosineLogits::new(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn naive_examples() {
        close(loss_naive(&logits(&[1.0]), 0).unwrap(), 0.313261687518222834, 1e-15);
        close(loss_naive(&logits(&[0.0, 0.0]), 0).unwrap(), 1.386294361119890618, 1e-15);
        close(loss_naive(&logits(&[1.0, -1.0, -1.0]), 0).unwrap(), 3.0 * 0.313261687518222834, 1e-15);
        assert!(matches!(loss_naive(&logits(&[0.0]), 1), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn balanced_examples() {
        close(loss_balanced(&logits(&[0.0, 0.0]), 0, 0.5).unwrap(), std::f64::consts::LN_2, 1e-15);
        // lambda = 1 keeps only the positive term.
        let c = logits(&[0.3, 0.9, -0.2]);
        close(loss_balanced(&c, 0, 1.0).unwrap(), softplus(-0.3), 1e-15);
        // Twice the lambda = 0.5 loss is the naive loss.
        close(2.0 * loss_balanced(&c, 1, 0.5).unwrap(), loss_naive(&c, 1).unwrap(), 1e-15);
    }

    #[test]
    fn curvature_examples() {
        let c = logits(&[0.3, 0.9, -0.2]);
        assert_eq!(loss_curvature(&c, 2, 0.7, 1.0).unwrap(), loss_balanced(&c, 2, 0.7).unwrap());
        // Easy sample: (1/r)·softplus(−r z) ≤ (1/r)·e^{−r z}.
        let easy = loss_curvature(&logits(&[0.5]), 0, 1.0, 60.0).unwrap();
        assert!(easy <= 1e-13, "{easy}");
        assert!(easy <= (-30.0f64).exp() / 60.0 * (1.0 + 1e-12));
        // Hard sample keeps its magnitude.
        let hard = loss_curvature(&logits(&[-0.5]), 0, 1.0, 30.0).unwrap();
        close(hard, 0.5 + (1.0 + (-15.0f64).exp()).ln() / 30.0, 1e-15);
    }

    #[test]
    fn final_reduces_to_symmetric_softplus() {
        let hp = Hyperparams::new(0.5, 1.0, 0.0, 1.0).unwrap();
        let out = loss_final(&logits(&[1.0, -1.0]), 0, &hp, 0.0).unwrap();
        close(out.value, 0.313261687518222834, 1e-15);
    }

    #[test]
    fn final_reduces_to_curvature_without_margin() {
        let hp = Hyperparams::new(0.7, 30.0, 0.0, 1.0).unwrap();
        let c = logits(&[0.1, -0.4, 0.8, 0.0]);
        for y in 0..4 {
            let f = loss_final(&c, y, &hp, 0.0).unwrap().value;
            close(f, loss_curvature(&c, y, 0.7, 30.0).unwrap(), 1e-14);
        }
    }

    #[test]
    fn boundary_gap_is_two_r_m() {
        let hp = Hyperparams::new(0.7, 30.0, 0.4, 3.0).unwrap();
        let head = OneVsAll::sphereface2(&hp).unwrap();
        let b = -2.5;
        for c in [-0.7, 0.0, 0.35, 0.9] {
            let gz = g(c, hp.exponent()).unwrap();
            let u = hp.r * (gz + head.positive_shift(c).unwrap()) + b;
            let v = hp.r * (gz + head.m_n) + b;
            close(u - v, -2.0 * hp.r * 0.4, 1e-12);
        }
    }

    #[test]
    fn closed_form_cos_gradients() {
        let hp = Hyperparams::new(0.7, 40.0, 0.4, 3.0).unwrap();
        let c = [0.2, -0.3, 0.6];
        let b = -1.3;
        let out = loss_final(&logits(&c), 1, &hp, b).unwrap();
        let t = hp.exponent();
        let u = hp.r * (g(c[1], t).unwrap() - 0.4) + b;
        close(out.d_cos[1], -0.7 * sigmoid(-u) * g_prime(c[1], t).unwrap(), 1e-15);
        let v0 = hp.r * (g(c[0], t).unwrap() + 0.4) + b;
        close(out.d_cos[0], 0.3 * sigmoid(v0) * g_prime(c[0], t).unwrap(), 1e-15);
        let v2 = hp.r * (g(c[2], t).unwrap() + 0.4) + b;
        let db = -0.7 / 40.0 * sigmoid(-u) + 0.3 / 40.0 * (sigmoid(v0) + sigmoid(v2));
        close(out.d_bias, db, 1e-15);
    }

    #[test]
    fn angular_variants_without_margin_match_plain() {
        let c = logits(&[0.25, -0.6, 0.1]);
        let plain = loss_final(&c, 0, &Hyperparams::new(0.7, 30.0, 0.0, 3.0).unwrap(), 0.4).unwrap();
        for (variant, m) in [(MarginVariant::ArcAdditive, 0.0), (MarginVariant::Multiplicative, 1.0)] {
            let hp = Hyperparams::new(0.7, 30.0, 0.0, 3.0).unwrap().with_variant(variant, m).unwrap();
            let out = loss_variant(&c, 0, &hp, 0.4).unwrap();
            close(out.value, plain.value, 1e-14);
            for (a, b) in out.d_cos.iter().zip(&plain.d_cos) {
                close(*a, *b, 1e-14);
            }
        }
        assert!(loss_variant(&c, 0, &Hyperparams::ablation_default(), 0.0).is_err());
    }

    #[test]
    fn angular_shift_rules() {
        let arc = OneVsAll::sphereface2(&Hyperparams::arc_default()).unwrap();
        let mult = OneVsAll::sphereface2(&Hyperparams::multiplicative_default()).unwrap();
        let t = AdjustExponent::new(3.0).unwrap();
        // Arc: theta + m capped at pi.
        let c = 0.3f64;
        let expect = g((c.acos() + 0.5).cos(), t).unwrap() - g(c, t).unwrap();
        close(arc.positive_shift(c).unwrap(), expect, 1e-15);
        let near_pi = -0.99f64;
        close(arc.positive_shift(near_pi).unwrap(), -1.0 - g(near_pi, t).unwrap(), 1e-12);
        // Multiplicative: min(m, pi/theta)·theta, theta = 0 handled by the acos guard.
        let expect = g((1.7 * c.acos()).cos(), t).unwrap() - g(c, t).unwrap();
        close(mult.positive_shift(c).unwrap(), expect, 1e-15);
        assert!(mult.positive_shift(1.0).unwrap().abs() < 1e-10);
        close(mult.positive_shift(-0.5).unwrap(), -1.0 - g(-0.5, t).unwrap(), 1e-12);
        // Negative terms carry no margin.
        assert_eq!(arc.m_n, 0.0);
        assert_eq!(mult.m_n, 0.0);
    }

    #[test]
    fn detached_gradient_differs_from_full_derivative() {
        let hp = Hyperparams::arc_default();
        let head = OneVsAll::sphereface2(&hp).unwrap();
        let c = [0.3, -0.1];
        let analytic = head.eval(&c, 0, 0.0).unwrap().d_cos[0];
        let h = 1e-6;
        let f = |z: f64| head.eval(&[z, c[1]], 0, 0.0).unwrap().value;
        let full = (f(c[0] + h) - f(c[0] - h)) / (2.0 * h);
        assert!((full - analytic).abs() > 1e-4);
        let shift = head.positive_shift(c[0]).unwrap();
        let frozen = |z: f64| head.eval_with_shift(&[z, c[1]], 0, 0.0, shift).unwrap().value;
        let fd = (frozen(c[0] + h) - frozen(c[0] - h)) / (2.0 * h);
        assert!((fd - analytic).abs() <= 1e-8 * analytic.abs().max(1.0));
    }

    #[test]
    fn ablation_dispatch() {
        let hp = Hyperparams::ablation_default();
        let c = logits(&[0.2, -0.5, 0.7, 0.1]);
        assert_eq!(
            loss_ablation(&c, 2, AblationFlags::NONE, &hp, 0.0).unwrap().value,
            loss_naive(&c, 2).unwrap()
        );
        assert_eq!(
            loss_ablation(&c, 2, AblationFlags::PN, &hp, 0.0).unwrap().value,
            loss_balanced(&c, 2, hp.lambda).unwrap()
        );
        assert_eq!(
            loss_ablation(&c, 2, AblationFlags::PN_EH, &hp, 0.0).unwrap().value,
            loss_curvature(&c, 2, hp.lambda, hp.r).unwrap()
        );
        assert_eq!(
            loss_ablation(&c, 2, AblationFlags::ALL, &hp, -3.0).unwrap(),
            loss_final(&c, 2, &hp, -3.0).unwrap()
        );
        let am = loss_ablation(&c, 2, AblationFlags::PN_EH_AM, &hp, -3.0).unwrap();
        let no_sa = Hyperparams { t: 1.0, ..hp };
        assert_eq!(am, loss_final(&c, 2, &no_sa, -3.0).unwrap());
        let bad = AblationFlags { am: true, ..AblationFlags::PN };
        assert!(matches!(loss_ablation(&c, 0, bad, &hp, 0.0), Err(Error::InvalidFlags(_))));
        assert_eq!("PN+EH".parse::<AblationFlags>().unwrap(), AblationFlags::PN_EH);
        assert_eq!(AblationFlags::ALL.label(), "PN+EH+AM+SA");
    }

    #[test]
    fn single_class_has_no_negative_sum() {
        let hp = Hyperparams::ablation_default();
        let out = loss_final(&logits(&[0.4]), 0, &hp, 1.0).unwrap();
        let u = 30.0 * (g(0.4, hp.exponent()).unwrap() - 0.4) + 1.0;
        close(out.value, 0.7 / 30.0 * softplus(-u), 1e-15);
    }

    #[test]
    fn finite_at_extremes() {
        let hp = Hyperparams::large_run();
        for c in [[-1.0, 1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, -1.0]] {
            for b in [-50.0, 0.0, 50.0] {
                let out = loss_final(&logits(&c), 0, &hp, b).unwrap();
                assert!(out.value.is_finite() && out.value > 0.0);
                assert!(out.d_cos.iter().all(|v| v.is_finite()) && out.d_bias.is_finite());
            }
        }
    }
}
