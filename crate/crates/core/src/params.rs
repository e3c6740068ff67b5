//! Parameter vectors, binary masks, the L2-ball domain and the server
//! fill-and-average rule shared by both training schemes.

use std::ops::Deref;

use crate::error::{check_dim, config_err, Error, Result};

/// Dense model parameters. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("parameter coordinate {j}"),
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Caller guarantees finiteness (results of arithmetic on finite inputs
    /// that are checked downstream).
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Binary coordinate selector, stored as one byte per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(j) = bits.iter().position(|&b| b > 1) {
            return Err(config_err(format!("mask entry {j} is {} (must be 0 or 1)", bits[j])));
        }
        Ok(Self { bits })
    }

    pub(crate) fn from_bits_unchecked(bits: Vec<u8>) -> Self {
        Self { bits }
    }

    pub fn ones(dim: usize) -> Self {
        Self { bits: vec![1; dim] }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { bits: vec![0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        self.bits[j] == 1
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Number of unselected coordinates, `||1 - m||^2`.
    pub fn deficit(&self) -> usize {
        self.dim() - self.popcount()
    }

    /// Zeroes unselected coordinates of `values` in place.
    pub fn apply_in_place(&self, values: &mut [f64]) {
        for (v, &b) in values.iter_mut().zip(&self.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
    }
}

/// Closed L2 ball of radius `radius` centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainBall {
    radius: f64,
}

impl DomainBall {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(config_err(format!("ball radius must be positive and finite, got {radius}")));
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        norm(w) <= self.radius
    }

    /// Projects `w` onto the ball in place.
    pub fn project_in_place(&self, w: &mut [f64]) {
        let n = norm(w);
        if n <= self.radius {
            return;
        }
        let scale = self.radius / n;
        for v in w.iter_mut() {
            *v *= scale;
        }
        // rounding can leave the norm a few ulps above the radius
        let mut guard = 0;
        while norm(w) > self.radius && guard < 8 {
            for v in w.iter_mut() {
                *v *= 1.0 - f64::EPSILON;
            }
            guard += 1;
        }
    }
}

/// `m ⊙ w`.
pub fn apply_mask(m: &Mask, w: &ParamVector) -> Result<ParamVector> {
    check_dim(w.dim(), m.dim())?;
    let mut out = w.values.clone();
    m.apply_in_place(&mut out);
    Ok(ParamVector::from_vec_unchecked(out))
}

/// Euclidean projection onto `ball`. Points inside are returned unchanged.
pub fn project_l2(w: &ParamVector, ball: &DomainBall) -> ParamVector {
    let mut out = w.values.clone();
    ball.project_in_place(&mut out);
    ParamVector::from_vec_unchecked(out)
}

/// Server aggregation: `P_W((1/N) Σ_i (local_i + (1 - m_i) ⊙ w_prev))`.
///
/// Clients are reduced in ascending index order into a single accumulator,
/// so the result is bitwise reproducible for a fixed client order.
pub fn server_average(
    locals: &[ParamVector],
    masks: &[Mask],
    w_prev: &ParamVector,
    ball: &DomainBall,
) -> Result<ParamVector> {
    if locals.is_empty() {
        return Err(config_err("server_average needs at least one client"));
    }
    check_dim(locals.len(), masks.len())?;
    let d = w_prev.dim();
    let mut acc = vec![0.0; d];
    for (local, mask) in locals.iter().zip(masks) {
        check_dim(d, local.dim())?;
        check_dim(d, mask.dim())?;
        for (((a, &x), &b), &prev) in acc.iter_mut().zip(&local.values).zip(&mask.bits).zip(&w_prev.values) {
            *a += x + if b == 1 { 0.0 } else { prev };
        }
    }
    let n = locals.len() as f64;
    for v in acc.iter_mut() {
        *v /= n;
    }
    if let Some(j) = acc.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("aggregated coordinate {j}"),
        });
    }
    ball.project_in_place(&mut acc);
    ParamVector::new(acc)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    let n = dot(a, a).sqrt();
    if n.is_finite() {
        return n;
    }
    // squares overflowed; rescale by the largest magnitude
    let m = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !m.is_finite() {
        return n;
    }
    m * a.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn apply_mask_examples() {
        let w = pv(&[2.0, 3.0, 4.0]);
        assert_eq!(apply_mask(&mask(&[1, 0, 1]), &w).unwrap().as_slice(), &[2.0, 0.0, 4.0]);
        assert_eq!(apply_mask(&Mask::ones(3), &w).unwrap(), w);
        assert_eq!(apply_mask(&Mask::zeros(3), &w).unwrap().as_slice(), &[0.0; 3]);
    }

    #[test]
    fn apply_mask_dim_mismatch() {
        let err = apply_mask(&Mask::ones(2), &pv(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn rejects_non_finite_and_bad_bits() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(Mask::new(vec![0, 2]).is_err());
        assert!(DomainBall::new(0.0).is_err());
        assert!(DomainBall::new(-1.0).is_err());
    }

    #[test]
    fn projection_examples() {
        let w = pv(&[3.0, 4.0]);
        assert_eq!(project_l2(&w, &DomainBall::new(10.0).unwrap()), w);
        assert_eq!(project_l2(&w, &DomainBall::new(5.0).unwrap()), w);
        let far = pv(&[6.0, 8.0]);
        assert_eq!(project_l2(&far, &DomainBall::new(5.0).unwrap()).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn server_average_examples() {
        let big = DomainBall::new(100.0).unwrap();
        let out = server_average(&[pv(&[5.0, 5.0])], &[Mask::ones(2)], &pv(&[1.0, 1.0]), &big).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 5.0]);

        let out = server_average(&[pv(&[5.0, 0.0])], &[mask(&[1, 0])], &pv(&[1.0, 2.0]), &big).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 2.0]);

        let out = server_average(
            &[pv(&[2.0, 2.0]), pv(&[4.0, 4.0])],
            &[Mask::ones(2), Mask::ones(2)],
            &pv(&[-7.0, 9.0]),
            &big,
        )
        .unwrap();
        assert_eq!(out.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn server_average_errors() {
        let ball = DomainBall::new(1.0).unwrap();
        assert!(matches!(
            server_average(&[], &[], &pv(&[0.0]), &ball),
            Err(Error::Config(_))
        ));
        assert!(server_average(&[pv(&[1.0, 2.0])], &[Mask::ones(1)], &pv(&[0.0, 0.0]), &ball).is_err());
        assert!(server_average(&[pv(&[1.0])], &[Mask::ones(1), Mask::ones(1)], &pv(&[0.0]), &ball).is_err());
    }

    #[test]
    fn deficit_counts_zeros() {
        let m = mask(&[1, 0, 0, 1, 1]);
        assert_eq!(m.popcount(), 3);
        assert_eq!(m.deficit(), 2);
    }
}
