//! Similarity adjustment `g(z) = 2((z+1)/2)^t - 1` and its derivative.
//!
//! `g` is a strictly increasing bijection of `[-1, 1]` that fixes both
//! endpoints. For `t > 1` it pushes mid-range cosines down, widening the
//! empirical range that trained similarity scores occupy.

use crate::error::{Error, Result};

/// Inputs this far outside `[-1, 1]` are treated as rounding drift and clamped.
pub const DOMAIN_SLACK: f64 = 1e-12;
/// Below `t = 1` the derivative is refused this close to `z = -1`.
pub const SINGULAR_GUARD: f64 = 1e-9;

/// Strength of the similarity adjustment; `t = 1` is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjustExponent(f64);

impl AdjustExponent {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Self(t))
        } else {
            Err(Error::InvalidHyperparams(format!("t must be > 0, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_identity(self) -> bool {
        self.0 == 1.0
    }
}

fn clamp_domain(z: f64) -> Result<f64> {
    if !(-1.0 - DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&z) {
        return Err(Error::Domain(z));
    }
    Ok(z.clamp(-1.0, 1.0))
}

/// Applies the similarity map.
pub fn g(z: f64, t: AdjustExponent) -> Result<f64> {
    let z = clamp_domain(z)?;
    if t.is_identity() {
        return Ok(z);
    }
    Ok(2.0 * ((z + 1.0) / 2.0).powf(t.0) - 1.0)
}

/// `dg/dz = t ((z+1)/2)^(t-1)`.
pub fn g_prime(z: f64, t: AdjustExponent) -> Result<f64> {
    let z = clamp_domain(z)?;
    if t.is_identity() {
        return Ok(1.0);
    }
    if t.0 < 1.0 && z <= -1.0 + SINGULAR_GUARD {
        return Err(Error::SingularDerivative { z, t: t.0 });
    }
    Ok(t.0 * ((z + 1.0) / 2.0).powf(t.0 - 1.0))
}
