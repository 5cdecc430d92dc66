use crate::error::{Error, Result};

/// Binary keep/drop vector over a flat parameter array.
///
/// The number of retained entries is cached so the sparsity ratio
/// `P_m = ones / len` is available without a rescan.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
    ones: usize,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let ones = bits.iter().filter(|&&b| b).count();
        Self { bits, ones }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
            ones: len,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
            ones: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.ones
    }

    /// Fraction of retained entries, `‖m‖₀ / |θ|`.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.ones as f64 / self.bits.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.ones == self.bits.len()
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.bits.len() != expected {
            return Err(Error::Length {
                expected,
                actual: self.bits.len(),
            });
        }
        Ok(())
    }
}

impl FromIterator<bool> for Mask {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self::from_bits(iter.into_iter().collect())
    }
}
