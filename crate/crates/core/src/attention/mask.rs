use crate::error::{Error, Result};
use crate::tensor::BoolTensor;

/// Which pivots `l` may contribute to edge `(i, j)`, per batch element.
///
/// Stored as `allowed[b][i][l][j]`; a mask with `batch == 1` applies to every
/// element of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PivotMask {
    batch: usize,
    n: usize,
    allowed: Vec<bool>,
}

impl PivotMask {
    pub fn from_fn(batch: usize, n: usize, mut f: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(batch * n * n * n);
        for b in 0..batch {
            for i in 0..n {
                for l in 0..n {
                    for j in 0..n {
                        allowed.push(f(b, i, l, j));
                    }
                }
            }
        }
        PivotMask { batch, n, allowed }
    }

    /// Every pivot allowed for every edge.
    pub fn full(n: usize) -> Self {
        PivotMask { batch: 1, n, allowed: vec![true; n * n * n] }
    }

    /// Per-element mask for a batch padded to `n` nodes: pivots at or beyond
    /// an element's real node count are disallowed for every edge.
    pub fn padded(n: usize, real: &[usize]) -> Self {
        Self::from_fn(real.len(), n, |b, _, l, _| l < real[b])
    }

    /// Decoder mask over `n_enc + n_dec` joint positions (encoder first).
    ///
    /// Pivot `l` is allowed for edge `(i, j)` iff `l` is an encoder position or
    /// its decoder index is at most the larger decoder index of `i` and `j`;
    /// encoder endpoints count as minus infinity.
    pub fn causal(n_enc: usize, n_dec: usize) -> Self {
        let dec = |p: usize| if p < n_enc { None } else { Some(p - n_enc) };
        Self::from_fn(1, n_enc + n_dec, |_, i, l, j| match dec(l) {
            None => true,
            Some(dl) => dec(i).max(dec(j)).is_some_and(|m| dl <= m),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, b: usize, i: usize, l: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[((b * self.n + i) * self.n + l) * self.n + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Pivots allowed by both masks. A single-element mask broadcasts.
    pub fn intersect(&self, other: &PivotMask) -> Result<PivotMask> {
        if self.n != other.n {
            return Err(Error::shape(format!("pivot masks over {} and {} nodes", self.n, other.n)));
        }
        let batch = match (self.batch, other.batch) {
            (a, b) if a == b => a,
            (1, b) => b,
            (a, 1) => a,
            (a, b) => return Err(Error::shape(format!("pivot masks with batch {a} and {b}"))),
        };
        Ok(Self::from_fn(batch, self.n, |b, i, l, j| self.allowed(b, i, l, j) && other.allowed(b, i, l, j)))
    }

    /// Checks that every edge keeps at least one pivot.
    pub fn validate(&self) -> Result<()> {
        for b in 0..self.batch {
            for i in 0..self.n {
                for j in 0..self.n {
                    if !(0..self.n).any(|l| self.allowed(b, i, l, j)) {
                        return Err(Error::DegenerateMask { slice: (b * self.n + i) * self.n + j });
                    }
                }
            }
        }
        Ok(())
    }

    /// Mask laid out as attention scores `(batch, 1, i, j, l)`, broadcasting over heads.
    pub(crate) fn score_layout(&self) -> BoolTensor {
        let n = self.n;
        let mut data = Vec::with_capacity(self.allowed.len());
        for b in 0..self.batch {
            for i in 0..n {
                for j in 0..n {
                    data.extend((0..n).map(|l| self.allowed(b, i, l, j)));
                }
            }
        }
        BoolTensor::new(&[self.batch, 1, n, n, n], data).expect("mask layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mask_allows_everything() {
        let m = PivotMask::full(3);
        assert_eq!(m.count_allowed(), 27);
        m.validate().unwrap();
    }

    #[test]
    fn padded_mask_blocks_padding_pivots() {
        let m = PivotMask::padded(3, &[2]);
        for i in 0..2 {
            for j in 0..2 {
                assert!(m.allowed(0, i, 0, j) && m.allowed(0, i, 1, j));
                assert!(!m.allowed(0, i, 2, j));
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn intersection_is_boolean_and() {
        let a = PivotMask::padded(3, &[2, 3]);
        let b = PivotMask::causal(1, 2);
        let c = a.intersect(&b).unwrap();
        assert_eq!(c.batch(), 2);
        for bi in 0..2 {
            for i in 0..3 {
                for l in 0..3 {
                    for j in 0..3 {
                        assert_eq!(c.allowed(bi, i, l, j), a.allowed(bi, i, l, j) && b.allowed(0, i, l, j));
                    }
                }
            }
        }
        assert!(a.intersect(&PivotMask::full(4)).is_err());
    }

    #[test]
    fn single_decoder_position() {
        let m = PivotMask::causal(3, 1);
        let p0 = 3;
        let pivots: Vec<usize> = (0..4).filter(|&l| m.allowed(0, p0, l, p0)).collect();
        assert_eq!(pivots, vec![0, 1, 2, 3]);
        // encoder-encoder edges see only encoder pivots
        assert!(!m.allowed(0, 0, 3, 1));
        assert!((0..3).all(|l| m.allowed(0, 0, l, 1)));
    }

    #[test]
    fn degenerate_mask_detected() {
        let m = PivotMask::from_fn(1, 2, |_, i, l, j| !(i == 1 && j == 0) || l == 5);
        assert!(matches!(m.validate(), Err(Error::DegenerateMask { .. })));
    }
}
