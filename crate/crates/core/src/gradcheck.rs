//! Central finite-difference check of the closed-form gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{LossHead, OneVsAll, Softmax};
use crate::sphere::{proxy_cosine, sample_sphere_uniform, ClassifierBank, Hyperparams, MarginVariant, UnitFeature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LossKind {
    Naive,
    Balanced,
    Curvature,
    Final,
    Arc,
    Mult,
    Softmax,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Naive,
        LossKind::Balanced,
        LossKind::Curvature,
        LossKind::Final,
        LossKind::Arc,
        LossKind::Mult,
        LossKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Naive => "naive",
            LossKind::Balanced => "balanced",
            LossKind::Curvature => "curvature",
            LossKind::Final => "final",
            LossKind::Arc => "arc",
            LossKind::Mult => "mult",
            LossKind::Softmax => "softmax",
        }
    }

    /// The head under test, taking λ, r, t (and m for the cosine variant) from `hp`.
    pub fn head(self, hp: &Hyperparams) -> Result<LossHead> {
        Ok(match self {
            LossKind::Naive => LossHead::OneVsAll(OneVsAll::naive()),
            LossKind::Balanced => LossHead::OneVsAll(OneVsAll::balanced(hp.lambda)?),
            LossKind::Curvature => LossHead::OneVsAll(OneVsAll::curvature(hp.lambda, hp.r)?),
            LossKind::Final => LossHead::OneVsAll(OneVsAll::sphereface2(hp)?),
            LossKind::Arc => LossHead::OneVsAll(OneVsAll::sphereface2(
                &hp.with_variant(MarginVariant::ArcAdditive, Hyperparams::arc_default().m_p)?,
            )?),
            LossKind::Mult => LossHead::OneVsAll(OneVsAll::sphereface2(
                &hp.with_variant(MarginVariant::Multiplicative, Hyperparams::multiplicative_default().m_p)?,
            )?),
            LossKind::Softmax => LossHead::Softmax(Softmax::new(hp.r, hp.m_p, 1.0)?),
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "sf2-c" && *k == LossKind::Final))
            .or(match s {
                "sf2-a" => Some(LossKind::Arc),
                "sf2-m" => Some(LossKind::Mult),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckSpec {
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub dims: Vec<usize>,
    pub hp: Hyperparams,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            trials: 50,
            step: 1e-6,
            seed: 0,
            classes: vec![2, 8, 32],
            dims: vec![4, 16],
            hp: Hyperparams::ablation_default(),
            rel_tol: 1e-5,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub loss: &'static str,
    pub trials: usize,
    pub checked: usize,
    /// Largest relative error among entries whose absolute error exceeds `abs_tol`.
    pub max_rel: f64,
    pub max_abs: f64,
    pub failures: usize,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

fn loss_value(head: &LossHead, x: &[f64], bank: &ClassifierBank, y: usize, shift: Option<f64>) -> Result<f64> {
    match head {
        LossHead::OneVsAll(h) => Ok(h.forward_backward(x, bank, y, shift)?.value),
        LossHead::Softmax(_) => Ok(head.forward_backward(x, bank, y)?.value),
    }
}

/// Random instance: proxies and feature with non-unit norms, random label and bias.
fn instance(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<(ClassifierBank, Vec<f64>, usize)> {
    let rows = (0..classes)
        .map(|_| {
            let s = rng.random_range(0.5..2.0);
            Ok(sample_sphere_uniform(dim, rng)?.into_iter().map(|v| v * s).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let bias = rng.random_range(-15.0..2.0);
    let bank = ClassifierBank::from_rows(&rows, bias)?;
    let s = rng.random_range(0.5..3.0);
    let x = sample_sphere_uniform(dim, rng)?.into_iter().map(|v| v * s).collect();
    Ok((bank, x, rng.random_range(0..classes)))
}

pub fn gradcheck(kind: LossKind, spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let head = kind.head(&spec.hp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<(usize, usize)> = spec
        .classes
        .iter()
        .flat_map(|&k| spec.dims.iter().map(move |&d| (k, d)))
        .collect();
    let mut report = GradcheckReport {
        loss: kind.name(),
        trials: spec.trials,
        checked: 0,
        max_rel: 0.0,
        max_abs: 0.0,
        failures: 0,
    };
    let h = spec.step;
    for trial in 0..spec.trials {
        let (classes, dim) = shapes[trial % shapes.len()];
        let (bank, x, y) = instance(&mut rng, classes, dim)?;
        let analytic = head.forward_backward(&x, &bank, y)?;
        // Angular variants: the margin shift is a constant in backward.
        let shift = match &head {
            LossHead::OneVsAll(o) => {
                let feat = UnitFeature::new(&x)?;
                Some(o.positive_shift(proxy_cosine(&feat.unit, bank.weight(y)).0)?)
            }
            LossHead::Softmax(_) => None,
        };
        let mut check = |a: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let abs = (a - fd).abs();
            let rel = abs / a.abs().max(fd.abs());
            report.checked += 1;
            report.max_abs = report.max_abs.max(abs);
            if abs > spec.abs_tol {
                report.max_rel = report.max_rel.max(rel);
                if rel > spec.rel_tol {
                    report.failures += 1;
                }
            }
        };
        for k in 0..dim {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            check(
                analytic.d_feature[k],
                loss_value(&head, &xp, &bank, y, shift)?,
                loss_value(&head, &xm, &bank, y, shift)?,
            );
        }
        for k in 0..classes * dim {
            let mut bp = bank.clone();
            bp.weights_mut()[k] += h;
            let mut bm = bank.clone();
            bm.weights_mut()[k] -= h;
            check(
                analytic.d_weights[k],
                loss_value(&head, &x, &bp, y, shift)?,
                loss_value(&head, &x, &bm, y, shift)?,
            );
        }
        if head.uses_bias() {
            let mut bp = bank.clone();
            bp.bias += h;
            let mut bm = bank.clone();
            bm.bias -= h;
            check(
                analytic.d_bias,
                loss_value(&head, &x, &bp, y, shift)?,
                loss_value(&head, &x, &bm, y, shift)?,
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_a_short_run() {
        let spec = GradcheckSpec { trials: 6, ..GradcheckSpec::default() };
        for kind in LossKind::ALL {
            let r = gradcheck(kind, &spec).unwrap();
            assert!(r.pass(), "{kind:?}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn detects_a_wrong_step() {
        // A huge step makes the central difference inaccurate for curved losses.
        let spec = GradcheckSpec { trials: 3, step: 0.3, ..GradcheckSpec::default() };
        assert!(!gradcheck(LossKind::Final, &spec).unwrap().pass());
    }

    #[test]
    fn names_parse() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("sf2-a".parse::<LossKind>().unwrap(), LossKind::Arc);
        assert!("nope".parse::<LossKind>().is_err());
    }
}
