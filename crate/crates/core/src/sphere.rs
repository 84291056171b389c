//! Hypersphere geometry: normalization, the classifier bank, cosine logits
//! and the loss hyperparameters shared by every module.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simadjust::AdjustExponent;

/// Vectors with a norm at or below this are rejected as degenerate.
pub const EPS_NORM: f64 = 1e-12;
/// Cosines may drift this far past ±1 before clamping is considered a bug.
pub const COS_CLAMP_TOL: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// A raw feature together with its norm and unit direction.
#[derive(Clone, Debug)]
pub struct UnitFeature {
    pub unit: Vec<f64>,
    pub norm: f64,
}

impl UnitFeature {
    pub fn new(x: &[f64]) -> Result<Self> {
        let n = norm(x);
        if !(n > EPS_NORM) {
            return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
        }
        Ok(Self {
            unit: x.iter().map(|v| v / n).collect(),
            norm: n,
        })
    }
}

/// How the angular margin is applied to the positive logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MarginVariant {
    /// Subtract `m_p` from the positive cosine, add `m_n` to negative ones.
    #[default]
    CosineAdditive,
    /// Add `m_p` to the positive angle (capped at π); detached in backward.
    ArcAdditive,
    /// Multiply the positive angle by `m_p ≥ 1` (capped at π); detached in backward.
    Multiplicative,
}

impl std::str::FromStr for MarginVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "c" | "sf2-c" => Ok(Self::CosineAdditive),
            "arc" | "a" | "sf2-a" => Ok(Self::ArcAdditive),
            "mult" | "multiplicative" | "m" | "sf2-m" => Ok(Self::Multiplicative),
            _ => Err(Error::InvalidArgument(format!("unknown margin variant '{s}'"))),
        }
    }
}

/// Knobs of the one-vs-all hyperspherical loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Weight of the positive term; negatives get `1 - lambda`.
    pub lambda: f64,
    /// Logit scale (radius of the feature hypersphere).
    pub r: f64,
    pub m_p: f64,
    pub m_n: f64,
    /// Similarity adjustment exponent.
    pub t: f64,
    pub margin_variant: MarginVariant,
}

impl Hyperparams {
    /// Tied margins (`m_p = m_n = m`) with the cosine-additive variant.
    pub fn new(lambda: f64, r: f64, m: f64, t: f64) -> Result<Self> {
        let hp = Self {
            lambda,
            r,
            m_p: m,
            m_n: m,
            t,
            margin_variant: MarginVariant::CosineAdditive,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// λ=0.7, r=30, m=0.4, t=3: the centre of the hyperparameter grid.
    pub fn ablation_default() -> Self {
        Self::new(0.7, 30.0, 0.4, 3.0).expect("valid preset")
    }

    /// λ=0.7, r=40, m=0.4, t=3: the large-run preset.
    pub fn large_run() -> Self {
        Self::new(0.7, 40.0, 0.4, 3.0).expect("valid preset")
    }

    /// Arc-additive margin with its default angle offset of 0.5.
    pub fn arc_default() -> Self {
        Self::ablation_default()
            .with_variant(MarginVariant::ArcAdditive, 0.5)
            .expect("valid preset")
    }

    /// Multiplicative margin with its default multiplier of 1.7.
    pub fn multiplicative_default() -> Self {
        Self::ablation_default()
            .with_variant(MarginVariant::Multiplicative, 1.7)
            .expect("valid preset")
    }

    pub fn with_margins(mut self, m_p: f64, m_n: f64) -> Result<Self> {
        self.m_p = m_p;
        self.m_n = m_n;
        self.validate()?;
        Ok(self)
    }

    /// Switches variant; for the angular variants `m` is the positive margin
    /// and the negative margin is unused.
    pub fn with_variant(mut self, variant: MarginVariant, m: f64) -> Result<Self> {
        self.margin_variant = variant;
        self.m_p = m;
        if variant != MarginVariant::CosineAdditive {
            self.m_n = 0.0;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn exponent(&self) -> AdjustExponent {
        AdjustExponent::new(self.t).expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperparams(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0,1], got {}", self.lambda));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return bad(format!("r must be > 0, got {}", self.r));
        }
        if !(self.t.is_finite() && self.t > 0.0) {
            return bad(format!("t must be > 0, got {}", self.t));
        }
        if !(self.m_p >= 0.0 && self.m_n >= 0.0) || !self.m_p.is_finite() || !self.m_n.is_finite() {
            return bad(format!("margins must be finite and >= 0, got ({}, {})", self.m_p, self.m_n));
        }
        if self.margin_variant == MarginVariant::Multiplicative && self.m_p < 1.0 {
            return bad(format!("multiplicative margin must be >= 1, got {}", self.m_p));
        }
        Ok(())
    }
}

/// `K` unnormalized proxy vectors of dimension `D` plus one shared bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    pub bias: f64,
}

impl ClassifierBank {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("classifier bank needs K >= 1 and D >= 1".into()));
        }
        if weights.len() != classes * dim {
            return Err(Error::DimensionMismatch {
                expected: classes * dim,
                got: weights.len(),
            });
        }
        let bank = Self {
            classes,
            dim,
            weights,
            bias,
        };
        for i in 0..classes {
            let n = norm(bank.weight(i));
            if !(n > EPS_NORM) {
                return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
            }
        }
        Ok(bank)
    }

    pub fn from_rows(rows: &[Vec<f64>], bias: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Self::new(rows.len(), dim, rows.concat(), bias)
    }

    /// Standard-normal entries, each row rescaled to unit norm.
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut weights = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            weights.extend(sample_sphere_uniform(dim, rng)?);
        }
        Self::new(classes, dim, weights, 0.0)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight_norm(&self, i: usize) -> f64 {
        norm(self.weight(i))
    }

    /// Unit direction of proxy `i`.
    pub fn direction(&self, i: usize) -> Vec<f64> {
        let n = self.weight_norm(i);
        self.weight(i).iter().map(|w| w / n).collect()
    }

    /// Copies classes `range` into a new bank with the same bias.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let w = self.weights[range.start * self.dim..range.end * self.dim].to_vec();
        Self::new(range.len(), self.dim, w, self.bias)
    }
}

/// Per-class cosine similarities between a feature and every proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineLogits {
    values: Vec<f64>,
}

impl CosineLogits {
    /// Accepts values within [`COS_CLAMP_TOL`] of `[-1, 1]` and clamps them.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let mut values = values;
        for v in values.iter_mut() {
            if !(v.abs() <= 1.0 + COS_CLAMP_TOL) {
                return Err(Error::Domain(*v));
            }
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cosine between the unit feature and proxy `i`, plus the proxy's norm.
#[inline]
pub(crate) fn proxy_cosine(unit_x: &[f64], w: &[f64]) -> (f64, f64) {
    let wn = norm(w);
    let c = (dot(w, unit_x) / wn).clamp(-1.0, 1.0);
    (c, wn)
}

pub fn cosine_logits(x: &[f64], bank: &ClassifierBank) -> Result<CosineLogits> {
    if x.len() != bank.dim() {
        return Err(Error::DimensionMismatch { expected: bank.dim(), got: x.len() });
    }
    let feat = UnitFeature::new(x)?;
    let values = (0..bank.classes())
        .map(|i| proxy_cosine(&feat.unit, bank.weight(i)).0)
        .collect();
    Ok(CosineLogits { values })
}

/// Rotation-invariant draw on the unit sphere in `dim` dimensions.
pub fn sample_sphere_uniform<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("sphere dimension must be >= 2, got {dim}")));
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return Ok(u);
        }
    }
}
