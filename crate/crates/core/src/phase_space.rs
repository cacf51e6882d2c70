//! Discretized phase space `C([-r, 0], R^n)`, its jump extension, and the
//! sup and weighted norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth_rate::{sgn, GrowthRate};

/// Anything that can be read as a function `[-r, 0] -> R^n`.
pub trait SegmentView {
    fn delay(&self) -> f64;
    fn dim(&self) -> usize;
    /// Writes the value at `omega` into `out`. `omega` is assumed to lie in
    /// `[-r, 0]`; implementations clamp rather than fail.
    fn value_into(&self, omega: f64, out: &mut [f64]);

    fn value(&self, omega: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.value_into(omega, &mut out);
        out
    }

    /// Single component at `omega`.
    fn component(&self, omega: f64, i: usize) -> f64 {
        let mut out = vec![0.0; self.dim()];
        self.value_into(omega, &mut out);
        out[i]
    }
}

/// Samples on the uniform grid `omega_j = -r + j r / m`, `j = 0..=m`,
/// stored node-major (`values[j * n + i]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub r: f64,
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn zeros(r: f64, n: usize, m: usize) -> Self {
        Self { r, n, m, values: vec![0.0; (m + 1) * n] }
    }

    pub fn from_values(r: f64, n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (m + 1) * n {
            return Err(Error::DimensionMismatch { expected: (m + 1) * n, got: values.len() });
        }
        if !(r > 0.0) {
            return Err(Error::NonPositiveDelay(r));
        }
        if m == 0 || n == 0 {
            return Err(Error::DegenerateGrid);
        }
        Ok(Self { r, n, m, values })
    }

    /// Samples `f` on the grid.
    pub fn from_fn(r: f64, n: usize, m: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut s = Self::zeros(r, n, m);
        for j in 0..=m {
            let w = s.node(j);
            f(w, &mut s.values[j * n..(j + 1) * n]);
        }
        s
    }

    pub fn constant(r: f64, m: usize, v: &[f64]) -> Self {
        Self::from_fn(r, v.len(), m, |_, out| out.copy_from_slice(v))
    }

    /// Samples any view on this grid shape.
    pub fn sample(view: &impl SegmentView, m: usize) -> Self {
        Self::from_fn(view.delay(), view.dim(), m, |w, out| view.value_into(w, out))
    }

    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        if j == self.m {
            0.0
        } else {
            -self.r + j as f64 * self.r / self.m as f64
        }
    }

    #[inline]
    pub fn at_node(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    #[inline]
    pub fn at_node_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.n;
        &mut self.values[j * n..(j + 1) * n]
    }

    /// Value at `omega = 0`.
    pub fn head(&self) -> &[f64] {
        self.at_node(self.m)
    }

    /// Max over nodes of the max-norm of the entries.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn mu_norm(&self, t: f64, g: &GrowthRate, xi: f64, eps: f64) -> f64 {
        self.sup_norm() * mu_weight(g, t, xi, eps)
    }

    /// Piecewise-linear interpolation; exact at nodes.
    pub fn interpolate(&self, omega: f64) -> Result<Vec<f64>> {
        if !(omega >= -self.r * (1.0 + 1e-14) && omega <= 0.0) {
            return Err(Error::OutOfDomain { omega, r: self.r });
        }
        let mut out = vec![0.0; self.n];
        self.value_into(omega, &mut out);
        Ok(out)
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.scale(c);
        s
    }

    /// `self += c * other`; shapes must agree.
    pub fn axpy(&mut self, c: f64, other: &Segment) -> Result<()> {
        self.check_shape(other)?;
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    pub fn sub(&self, other: &Segment) -> Result<Segment> {
        let mut s = self.clone();
        s.axpy(-1.0, other)?;
        Ok(s)
    }

    pub fn check_shape(&self, other: &Segment) -> Result<()> {
        if self.n != other.n || self.m != other.m {
            return Err(Error::DimensionMismatch {
                expected: (self.m + 1) * self.n,
                got: (other.m + 1) * other.n,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl SegmentView for Segment {
    fn delay(&self) -> f64 {
        self.r
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn value_into(&self, omega: f64, out: &mut [f64]) {
        let x = ((omega + self.r) / self.r * self.m as f64).clamp(0.0, self.m as f64);
        let j = (x.floor() as usize).min(self.m - 1);
        let f = x - j as f64;
        let (a, b) = (self.at_node(j), self.at_node(j + 1));
        for i in 0..self.n {
            out[i] = a[i] + f * (b[i] - a[i]);
        }
    }
}

/// An element of `C_0`: a continuous `base` on `[-r, 0]` plus a jump at
/// `omega = 0`, so the value at `0` is `base(0) + jump` while the left limit
/// is `base(0)`. `X_0 p` is the case `base = 0`, `jump = p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSegment {
    pub base: Segment,
    pub jump: Vec<f64>,
}

impl JumpSegment {
    /// `X_0 p`.
    pub fn x0(r: f64, m: usize, p: &[f64]) -> Self {
        Self { base: Segment::zeros(r, p.len(), m), jump: p.to_vec() }
    }

    pub fn new(base: Segment, jump: Vec<f64>) -> Result<Self> {
        if jump.len() != base.n {
            return Err(Error::DimensionMismatch { expected: base.n, got: jump.len() });
        }
        Ok(Self { base, jump })
    }

    /// Value at `omega = 0` (not the left limit).
    pub fn head(&self) -> Vec<f64> {
        self.base.head().iter().zip(&self.jump).map(|(b, j)| b + j).collect()
    }

    /// Sup norm over `[-r, 0]` including the point value at `0`.
    pub fn sup_norm(&self) -> f64 {
        let h = self.head().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        self.base.sup_norm().max(h)
    }

    /// Left limit view (ignores the jump).
    pub fn left(&self) -> &Segment {
        &self.base
    }
}

impl SegmentView for JumpSegment {
    fn delay(&self) -> f64 {
        self.base.r
    }

    fn dim(&self) -> usize {
        self.base.n
    }

    fn value_into(&self, omega: f64, out: &mut [f64]) {
        self.base.value_into(omega, out);
        if omega >= 0.0 {
            out.iter_mut().zip(&self.jump).for_each(|(o, j)| *o += j);
        }
    }
}

/// `mu(t)^{-sgn(t)(xi + eps)}`, the factor turning `||.||` into `||.||_mu`.
#[inline]
pub fn mu_weight(g: &GrowthRate, t: f64, xi: f64, eps: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        g.eval(t).powf(-sgn(t) * (xi + eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sup_norm_examples() {
        assert_eq!(Segment::zeros(1.0, 2, 8).sup_norm(), 0.0);
        assert_eq!(Segment::constant(1.0, 8, &[3.0, -4.0]).sup_norm(), 4.0);
        let id = Segment::from_fn(1.0, 1, 100, |w, o| o[0] = w);
        assert_eq!(id.sup_norm(), 1.0);
    }

    #[test]
    fn mu_norm_examples() {
        let g = GrowthRate::exponential();
        let unit = Segment::constant(1.0, 4, &[1.0]);
        let s = Segment::from_fn(1.0, 2, 16, |w, o| {
            o[0] = w.sin();
            o[1] = 2.0 * w;
        });
        assert_eq!(s.mu_norm(0.0, &g, 0.6, 0.1), s.sup_norm());
        assert_relative_eq!(unit.mu_norm(1.0, &g, 0.6, 0.1), (-0.7f64).exp(), max_relative = 1e-14);
        // sgn(-1) = -1: mu(-1)^{-(-1)(0.7)} = (e^{-1})^{0.7}
        let brute = (-1.0f64).exp().powf(0.7);
        assert_relative_eq!(unit.mu_norm(-1.0, &g, 0.6, 0.1), brute, max_relative = 1e-14);
        assert_relative_eq!(brute, (-0.7f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn interpolation() {
        let s = Segment::from_fn(1.0, 1, 2, |w, o| o[0] = w);
        assert_eq!(s.interpolate(-0.25).unwrap(), vec![-0.25]);
        assert_eq!(s.interpolate(-0.5).unwrap(), vec![-0.5]);
        assert_eq!(s.interpolate(0.0).unwrap(), vec![0.0]);
        assert_eq!(s.interpolate(-1.0).unwrap(), vec![-1.0]);
        assert!(matches!(s.interpolate(0.1), Err(Error::OutOfDomain { .. })));
        assert!(matches!(s.interpolate(-1.5), Err(Error::OutOfDomain { .. })));
        let c = Segment::constant(2.0, 3, &[7.0, -1.0]);
        assert_eq!(c.interpolate(-1.0).unwrap(), vec![7.0, -1.0]);
        for j in 0..=3 {
            assert_eq!(c.interpolate(c.node(j)).unwrap(), c.at_node(j).to_vec());
        }
    }

    #[test]
    fn jump_segment_keeps_discontinuity() {
        let j = JumpSegment::x0(1.0, 8, &[2.0, -3.0]);
        assert_eq!(j.value(0.0), vec![2.0, -3.0]);
        assert_eq!(j.value(-1e-9), vec![0.0, 0.0]);
        assert_eq!(j.value(-0.5), vec![0.0, 0.0]);
        assert_eq!(j.sup_norm(), 3.0);
        assert_eq!(j.left().sup_norm(), 0.0);
    }

    #[test]
    fn serde_round_trip() {
        let s = Segment::from_fn(0.5, 2, 4, |w, o| {
            o[0] = w;
            o[1] = 1.0;
        });
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"r\":0.5") && text.contains("\"m\":4"));
        let back: Segment = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(Segment::from_values(1.0, 2, 4, vec![0.0; 9]).is_err());
    }

    #[test]
    fn refinement_is_second_order() {
        // peak sits between nodes on every grid
        let f = |w: f64| (-(w + 0.3141).powi(2) * 40.0).exp();
        let errs: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&m| (1.0 - Segment::from_fn(1.0, 1, m, |w, o| o[0] = f(w)).sup_norm()).abs())
            .collect();
        let c = errs.iter().zip([8.0, 16.0, 32.0, 64.0]).map(|(e, m)| e * m * m).fold(0.0, f64::max);
        for (e, m) in errs.iter().zip([8.0f64, 16.0, 32.0, 64.0]) {
            assert!(*e <= c / (m * m) + 1e-15);
        }
        assert!(c < 40.0, "measured constant {c}");
    }

    proptest! {
        #[test]
        fn mu_norm_at_zero_is_sup(vals in prop::collection::vec(-10.0f64..10.0, 17)) {
            let s = Segment::from_values(1.0, 1, 16, vals).unwrap();
            for g in crate::growth_rate::builtin_catalogue() {
                prop_assert_eq!(s.mu_norm(0.0, &g, 0.6, 0.1), s.sup_norm());
            }
        }

        #[test]
        fn mu_norm_is_homogeneous(
            vals in prop::collection::vec(-10.0f64..10.0, 18),
            c in -5.0f64..5.0,
            t in -20.0f64..20.0,
        ) {
            let s = Segment::from_values(1.0, 2, 8, vals).unwrap();
            let g = GrowthRate::polynomial();
            let lhs = s.scaled(c).mu_norm(t, &g, 0.6, 0.1);
            let rhs = c.abs() * s.mu_norm(t, &g, 0.6, 0.1);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn interpolation_stays_within_hull(
            vals in prop::collection::vec(-10.0f64..10.0, 9),
            w in -1.0f64..=0.0,
        ) {
            let s = Segment::from_values(1.0, 1, 8, vals).unwrap();
            let v = s.interpolate(w).unwrap()[0];
            prop_assert!(v.abs() <= s.sup_norm() + 1e-12);
        }
    }
}
