//! Order-independent floating point summation.
//!
//! [`ExactSum`] keeps the running total as a wide fixed-point integer that
//! covers the whole `f64` exponent range, so every addition is exact. The
//! final conversion depends only on the exact real sum, which makes the
//! result bitwise identical for any grouping or ordering of the terms. The
//! sharded classifier relies on this: per-shard partial sums merged on the
//! coordinator reproduce the unsharded reduction exactly.

const DIGIT_BITS: u32 = 32;
const DIGIT_MASK: i64 = (1 << DIGIT_BITS) - 1;
// Bit positions 0..=2045 (+ 53 mantissa bits) plus headroom for carries.
const LIMBS: usize = 68;
// Each limb absorbs at most 2^32 per add; normalize well before i64 overflow.
const ADDS_BEFORE_NORMALIZE: u32 = 1 << 29;

#[derive(Clone, Debug)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    pending: u32,
    // Non-finite inputs are summed naively; they poison the result anyway.
    special: f64,
    has_special: bool,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            pending: 0,
            special: 0.0,
            has_special: false,
        }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let bits = x.to_bits();
        let biased = ((bits >> 52) & 0x7ff) as u32;
        if biased == 0x7ff {
            self.special += x;
            self.has_special = true;
            return;
        }
        let mut mant = bits & ((1u64 << 52) - 1);
        if mant == 0 && biased == 0 {
            return;
        }
        // value = mant * 2^(pos - 1074)
        let pos = if biased == 0 {
            0
        } else {
            mant |= 1u64 << 52;
            biased - 1
        };
        let k = (pos / DIGIT_BITS) as usize;
        let wide = (mant as u128) << (pos % DIGIT_BITS);
        let d0 = (wide as i64) & DIGIT_MASK;
        let d1 = ((wide >> 32) as i64) & DIGIT_MASK;
        let d2 = (wide >> 64) as i64;
        if (bits >> 63) == 0 {
            self.limbs[k] += d0;
            self.limbs[k + 1] += d1;
            self.limbs[k + 2] += d2;
        } else {
            self.limbs[k] -= d0;
            self.limbs[k + 1] -= d1;
            self.limbs[k + 2] -= d2;
        }
        self.pending += 1;
        if self.pending >= ADDS_BEFORE_NORMALIZE {
            self.normalize();
        }
    }

    /// Adds every term of `other` into `self`. Exact.
    pub fn merge(&mut self, other: &ExactSum) {
        let mut other = other.clone();
        other.normalize();
        self.normalize();
        for (a, b) in self.limbs.iter_mut().zip(other.limbs.iter()) {
            *a += *b;
        }
        self.pending = 1;
        if other.has_special {
            self.special += other.special;
            self.has_special = true;
        }
    }

    // Carry-propagate so that every limb but the last lies in [0, 2^32).
    fn normalize(&mut self) {
        let mut carry = 0i64;
        for limb in self.limbs.iter_mut().take(LIMBS - 1) {
            let v = *limb + carry;
            carry = v >> DIGIT_BITS;
            *limb = v & DIGIT_MASK;
        }
        self.limbs[LIMBS - 1] += carry;
        self.pending = 0;
    }

    /// Rounds the exact sum to the nearest `f64` (ties to even, except in
    /// the subnormal range where rounding may happen twice).
    pub fn value(&self) -> f64 {
        if self.has_special {
            return self.special;
        }
        let mut acc = self.clone();
        acc.normalize();
        let negative = acc.limbs[LIMBS - 1] < 0;
        if negative {
            for limb in acc.limbs.iter_mut() {
                *limb = -*limb;
            }
            acc.normalize();
        }
        let top = match acc.limbs.iter().rposition(|&d| d != 0) {
            Some(j) => j,
            None => return 0.0,
        };
        // Gather the three most significant digits (>= 64 significant bits)
        // and fold everything below into a sticky bit.
        let lo = top.saturating_sub(2);
        let mut head: u128 = 0;
        for j in (lo..=top).rev() {
            head = (head << DIGIT_BITS) | acc.limbs[j] as u128;
        }
        let sticky = acc.limbs[..lo].iter().any(|&d| d != 0);
        head = (head << 1) | sticky as u128;
        let exp = (lo as i32) * DIGIT_BITS as i32 - 1074 - 1;
        let magnitude = scale_pow2(head as f64, exp);
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

fn scale_pow2(mut x: f64, mut exp: i32) -> f64 {
    while exp > 1000 {
        x *= 2f64.powi(1000);
        exp -= 1000;
    }
    while exp < -1000 {
        x *= 2f64.powi(-1000);
        exp += 1000;
    }
    x * 2f64.powi(exp)
}

/// Exact-then-rounded sum of a sequence.
pub fn exact_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut acc = ExactSum::new();
    for t in terms {
        acc.add(t);
    }
    acc.value()
}

/// A vector of independent [`ExactSum`] accumulators.
#[derive(Clone, Debug)]
pub struct ExactVec {
    parts: Vec<ExactSum>,
}

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            parts: vec![ExactSum::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// `self += scale * v`, with the product rounded once per component.
    #[inline]
    pub fn add_scaled(&mut self, scale: f64, v: &[f64]) {
        for (acc, &x) in self.parts.iter_mut().zip(v) {
            acc.add(scale * x);
        }
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, x: f64) {
        self.parts[i].add(x);
    }

    pub fn merge(&mut self, other: &ExactVec) {
        for (a, b) in self.parts.iter_mut().zip(&other.parts) {
            a.merge(b);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.parts.iter().map(ExactSum::value).collect()
    }
}
