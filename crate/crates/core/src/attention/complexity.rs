//! Closed-form multiply-accumulate counts of the attention units.

use crate::error::{Error, Result};

/// Term groups of the dense count `3HWC^2 + 2H^2W^2C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhsaTerms {
    /// `3HWC^2`: query, key and value projections.
    pub projections: u128,
    /// `2(HW)^2 C`: `QK^T` and the attention-weighted sum.
    pub attention: u128,
}

impl MhsaTerms {
    pub fn new(h: u64, w: u64, c: u64) -> Result<Self> {
        positive(&[h, w, c])?;
        let (n, c) = (u128::from(h) * u128::from(w), u128::from(c));
        Ok(Self {
            projections: 3 * n * c * c,
            attention: 2 * n * n * c,
        })
    }

    pub fn total(&self) -> u128 {
        self.projections + self.attention
    }
}

/// Term groups of `HWC(4C + 2G1^2) + 2(HW/G2^2) C (C + HW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HmhsaTerms {
    /// `4HWC^2`: local query/key/value and the global query projections.
    pub projections: u128,
    /// `2HWC G1^2`: per-grid `QK^T` and weighted sum.
    pub local_attention: u128,
    /// `2(HW/G2^2) C^2`: key/value projections of the pooled tokens.
    pub pooled_projections: u128,
    /// `2(HW/G2^2) C HW`: full-resolution queries against pooled keys.
    pub global_attention: u128,
}

impl HmhsaTerms {
    pub fn new(h: u64, w: u64, c: u64, g1: u64, g2: u64) -> Result<Self> {
        positive(&[h, w, c, g1, g2])?;
        let n = u128::from(h) * u128::from(w);
        let (c, g1, g2) = (u128::from(c), u128::from(g1), u128::from(g2));
        if n % (g2 * g2) != 0 {
            return Err(Error::Contract(format!(
                "G2^2 = {} does not divide HW = {n}",
                g2 * g2
            )));
        }
        let pooled = n / (g2 * g2);
        Ok(Self {
            projections: 4 * n * c * c,
            local_attention: 2 * n * c * g1 * g1,
            pooled_projections: 2 * pooled * c * c,
            global_attention: 2 * pooled * c * n,
        })
    }

    pub fn total(&self) -> u128 {
        self.projections + self.local_attention + self.pooled_projections + self.global_attention
    }
}

fn positive(values: &[u64]) -> Result<()> {
    if values.contains(&0) {
        return Err(Error::Contract(format!(
            "complexity arguments must be positive, got {values:?}"
        )));
    }
    Ok(())
}

/// `3HWC^2 + 2H^2W^2C`.
pub fn complexity_mhsa(h: u64, w: u64, c: u64) -> Result<u128> {
    MhsaTerms::new(h, w, c).map(|t| t.total())
}

/// `HWC(4C + 2G1^2) + 2(HW/G2^2) C (C + HW)`.
pub fn complexity_hmhsa(h: u64, w: u64, c: u64, g1: u64, g2: u64) -> Result<u128> {
    HmhsaTerms::new(h, w, c, g1, g2).map(|t| t.total())
}
