//! Nonlinear perturbations `g(t, phi)` together with their derivative
//! `D_2 g(t, phi)` and the envelope checks they must satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::growth_rate::{sgn, GrowthRate};
use crate::phase_space::{mu_weight, Segment, SegmentView};

/// A bounded linear map `C -> R^n` of the form `h -> sum_k B_k h(-r_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFunctional {
    pub n: usize,
    /// `(lag, row-major n x n matrix)`.
    pub terms: Vec<(f64, Vec<f64>)>,
}

impl PointFunctional {
    pub fn new(n: usize, terms: Vec<(f64, Vec<f64>)>) -> Self {
        Self { n, terms }
    }

    pub fn zero(n: usize) -> Self {
        Self { n, terms: vec![] }
    }

    pub fn apply(&self, h: &dyn SegmentView) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_into(h, &mut out);
        out
    }

    pub fn apply_into(&self, h: &dyn SegmentView, out: &mut [f64]) {
        let n = self.n;
        let mut v = vec![0.0; n];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (lag, b) in &self.terms {
            h.value_into(-lag, &mut v);
            for i in 0..n {
                out[i] += (0..n).map(|j| b[i * n + j] * v[j]).sum::<f64>();
            }
        }
    }

    /// Exact operator norm from `(C, sup)` to `(R^n, max)`: terms at equal
    /// lags are merged, distinct lags can be driven independently.
    pub fn op_norm(&self) -> f64 {
        let n = self.n;
        let mut merged: Vec<(f64, Vec<f64>)> = Vec::new();
        for (lag, b) in &self.terms {
            match merged.iter_mut().find(|(l, _)| (l - lag).abs() < 1e-14) {
                Some((_, acc)) => acc.iter_mut().zip(b).for_each(|(a, x)| *a += x),
                None => merged.push((*lag, b.clone())),
            }
        }
        (0..n)
            .map(|i| {
                merged
                    .iter()
                    .map(|(_, b)| b[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// `self - other` as a functional.
    pub fn minus(&self, other: &PointFunctional) -> PointFunctional {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|(l, b)| (*l, b.iter().map(|x| -x).collect())));
        PointFunctional { n: self.n, terms }
    }
}

pub trait Perturbation: Send + Sync {
    fn dim(&self) -> usize;

    /// `g(t, phi)`.
    fn g_into(&self, t: f64, phi: &dyn SegmentView, out: &mut [f64]);

    /// `D_2 g(t, phi)`.
    fn d2g(&self, t: f64, phi: &dyn SegmentView) -> PointFunctional;

    /// True when `g` vanishes identically.
    fn is_zero(&self) -> bool {
        false
    }

    /// Delays `r_l` at which `g` and `D_2 g` read their argument, if known.
    /// Callers may use them to precompute history lookups.
    fn probe_lags(&self) -> Vec<f64> {
        vec![]
    }

    fn g(&self, t: f64, phi: &dyn SegmentView) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.g_into(t, phi, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct ZeroPerturbation {
    n: usize,
}

impl ZeroPerturbation {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Perturbation for ZeroPerturbation {
    fn dim(&self) -> usize {
        self.n
    }

    fn g_into(&self, _t: f64, _phi: &dyn SegmentView, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn d2g(&self, _t: f64, _phi: &dyn SegmentView) -> PointFunctional {
        PointFunctional::zero(self.n)
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// `g(t, phi) = P phi`, a linear perturbation (it violates the `D_2 g(t, 0) = 0`
/// requirement unless `P = 0`; used to exercise the integrator).
#[derive(Debug, Clone)]
pub struct LinearPoint(pub PointFunctional);

impl Perturbation for LinearPoint {
    fn dim(&self) -> usize {
        self.0.n
    }

    fn g_into(&self, _t: f64, phi: &dyn SegmentView, out: &mut [f64]) {
        self.0.apply_into(phi, out);
    }

    fn probe_lags(&self) -> Vec<f64> {
        self.0.terms.iter().map(|(lag, _)| *lag).collect()
    }

    fn d2g(&self, _t: f64, _phi: &dyn SegmentView) -> PointFunctional {
        self.0.clone()
    }
}

/// Scalar parameters the envelopes are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub xi: f64,
    pub eps: f64,
}

/// `mu'(t) mu(t)^{-sgn(t)(gamma + eps) - 1}`.
pub fn g_envelope(g: &GrowthRate, t: f64, gamma: f64, eps: f64) -> f64 {
    g.deriv(t) * g.eval(t).powf(-sgn(t) * (gamma + eps) - 1.0)
}

/// `mu'(t) mu(t)^{-sgn(t)(gamma + eps) - 2 sgn(t) xi - 1}`.
pub fn dg_envelope(g: &GrowthRate, t: f64, gamma: f64, eps: f64, xi: f64) -> f64 {
    g.deriv(t) * g.eval(t).powf(-sgn(t) * (gamma + eps) - 2.0 * sgn(t) * xi - 1.0)
}

#[inline]
fn psi(x: f64) -> f64 {
    let x2 = x * x;
    x2 / (1.0 + x2)
}

#[inline]
fn dpsi(x: f64) -> f64 {
    let d = 1.0 + x * x;
    2.0 * x / (d * d)
}

/// `g(t, phi) = A(t) psi(m(t) phi_i(-lag)) e` with `psi(x) = x^2 / (1 + x^2)`,
/// `m(t) = mu(t)^{-sgn(t)(xi + eps)}` and an amplitude `A(t)` sized so that
/// both envelopes hold: `sup |psi'| < 0.65 <= 1` and `sup |psi''| = 2`.
#[derive(Debug, Clone)]
pub struct SaturatingSquare {
    pub n: usize,
    pub input: usize,
    pub lag: f64,
    pub output: Vec<f64>,
    pub growth: GrowthRate,
    pub params: EnvelopeParams,
}

impl SaturatingSquare {
    pub fn new(
        n: usize,
        input: usize,
        lag: f64,
        output: Vec<f64>,
        growth: GrowthRate,
        params: EnvelopeParams,
    ) -> crate::error::Result<Self> {
        use crate::error::Error;
        if input >= n || output.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: output.len().max(input + 1) });
        }
        if output.iter().any(|e| e.abs() > 1.0) {
            return Err(Error::Model("perturbation output direction must satisfy |e|_inf <= 1".into()));
        }
        Ok(Self { n, input, lag, output, growth, params })
    }

    pub fn weight(&self, t: f64) -> f64 {
        mu_weight(&self.growth, t, self.params.xi, self.params.eps)
    }

    /// Smooth stand-in for `min(delta e_g, lambda e_dg / (2 m))`.
    pub fn amplitude(&self, t: f64) -> f64 {
        let p = &self.params;
        let eg = g_envelope(&self.growth, t, p.gamma, p.eps);
        let edg = dg_envelope(&self.growth, t, p.gamma, p.eps, p.xi);
        let m = self.weight(t);
        1.0 / (1.0 / (p.delta * eg) + 2.0 * m / (p.lambda * edg))
    }

    /// Scalar factor `A psi(m x)` for input value `x`.
    #[inline]
    pub fn profile(&self, t: f64, x: f64) -> f64 {
        self.amplitude(t) * psi(self.weight(t) * x)
    }

    /// Scalar factor `A psi'(m x) m`.
    #[inline]
    pub fn profile_slope(&self, t: f64, x: f64) -> f64 {
        let m = self.weight(t);
        self.amplitude(t) * dpsi(m * x) * m
    }
}

impl Perturbation for SaturatingSquare {
    fn dim(&self) -> usize {
        self.n
    }

    fn g_into(&self, t: f64, phi: &dyn SegmentView, out: &mut [f64]) {
        let x = phi.component(-self.lag, self.input);
        let c = self.profile(t, x);
        out.iter_mut().zip(&self.output).for_each(|(o, e)| *o = c * e);
    }

    fn probe_lags(&self) -> Vec<f64> {
        vec![self.lag]
    }

    fn d2g(&self, t: f64, phi: &dyn SegmentView) -> PointFunctional {
        let x = phi.component(-self.lag, self.input);
        let c = self.profile_slope(t, x);
        let n = self.n;
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            b[i * n + self.input] = c * self.output[i];
        }
        PointFunctional::new(n, vec![(self.lag, b)])
    }
}

/// Worst measured ratios of the envelope conditions over random pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub samples: usize,
    /// `max |g(t, 0)|`.
    pub g_at_zero: f64,
    /// `max ||D_2 g(t, 0)||`.
    pub dg_at_zero: f64,
    /// Lipschitz envelope with `min{1, ||phi - psi||}`.
    pub worst_sup_norm: f64,
    /// Lipschitz envelope with `min{1, ||phi - psi||_mu}`.
    pub worst_mu_norm: f64,
    pub worst_derivative: f64,
    /// Which of the two Lipschitz envelopes came closer to equality.
    pub binding: String,
    pub pass: bool,
}

/// Samples `samples` random pairs `(phi, psi)` at random `t` in `t_range`
/// and measures every envelope ratio. Passing means all ratios are
/// `<= 1 + tol` and `g`, `D_2 g` vanish at zero.
#[allow(clippy::too_many_arguments)]
pub fn check_envelopes(
    pert: &dyn Perturbation,
    g: &GrowthRate,
    p: &EnvelopeParams,
    r: f64,
    m: usize,
    t_range: (f64, f64),
    samples: usize,
    seed: u64,
    tol: f64,
) -> EnvelopeReport {
    let n = pert.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = Segment::zeros(r, n, m);
    let (mut g0, mut dg0) = (0.0f64, 0.0f64);
    let (mut w2, mut w4, mut wd) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..samples {
        let t = if k == 0 { 0.0 } else { rng.gen_range(t_range.0..=t_range.1) };
        g0 = g0.max(sup(&pert.g(t, &zero)));
        dg0 = dg0.max(pert.d2g(t, &zero).op_norm());

        let w = mu_weight(g, t, p.xi, p.eps);
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0)) / w;
        let phi = random_segment(&mut rng, r, n, m, scale);
        let psi = if rng.gen_bool(0.5) {
            let mut q = phi.clone();
            let small = scale * 10f64.powf(rng.gen_range(-4.0..0.0));
            let bump = random_segment(&mut rng, r, n, m, small);
            q.axpy(1.0, &bump).expect("same shape");
            q
        } else {
            random_segment(&mut rng, r, n, m, scale)
        };
        let d = phi.sub(&psi).expect("same shape");
        let dist = d.sup_norm();
        if dist == 0.0 {
            continue;
        }
        let dist_mu = dist * w;
        let eg = g_envelope(g, t, p.gamma, p.eps);
        let edg = dg_envelope(g, t, p.gamma, p.eps, p.xi);
        let lhs = sup(&sub(&pert.g(t, &phi), &pert.g(t, &psi)));
        w2 = w2.max(lhs / (p.delta * dist.min(1.0) * eg));
        w4 = w4.max(lhs / (p.delta * dist_mu.min(1.0) * eg));
        let dlhs = pert.d2g(t, &phi).minus(&pert.d2g(t, &psi)).op_norm();
        wd = wd.max(dlhs / (p.lambda * dist_mu.min(1.0) * edg));
    }
    let binding = if w4 >= w2 { "mu_norm" } else { "sup_norm" }.to_string();
    let pass = g0 == 0.0 && dg0 == 0.0 && w2 <= 1.0 + tol && w4 <= 1.0 + tol && wd <= 1.0 + tol;
    EnvelopeReport {
        samples,
        g_at_zero: g0,
        dg_at_zero: dg0,
        worst_sup_norm: w2,
        worst_mu_norm: w4,
        worst_derivative: wd,
        binding,
        pass,
    }
}

fn random_segment(rng: &mut ChaCha8Rng, r: f64, n: usize, m: usize, scale: f64) -> Segment {
    Segment::from_fn(r, n, m, |_, o| o.iter_mut().for_each(|v| *v = scale * rng.gen_range(-1.0..1.0)))
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> EnvelopeParams {
        EnvelopeParams { delta: 1e-3, gamma: 0.5, lambda: 1e-5, xi: 0.6, eps: 0.1 }
    }

    fn flagship() -> SaturatingSquare {
        SaturatingSquare::new(2, 1, 0.5, vec![1.0, 1.0], GrowthRate::exponential(), params()).unwrap()
    }

    #[test]
    fn psi_constants() {
        let (mut d1, mut d2) = (0.0f64, 0.0f64);
        for i in -40_000..=40_000 {
            let x = i as f64 * 1e-3;
            d1 = d1.max(dpsi(x).abs());
            let h = 1e-5;
            d2 = d2.max(((dpsi(x + h) - dpsi(x - h)) / (2.0 * h)).abs());
        }
        assert!(d1 < 0.65 && d1 > 0.64);
        assert_relative_eq!(d2, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn vanishes_at_zero() {
        let p = flagship();
        let zero = Segment::zeros(1.0, 2, 8);
        for &t in &[-5.0, 0.0, 3.0] {
            assert_eq!(p.g(t, &zero), vec![0.0, 0.0]);
            assert_eq!(p.d2g(t, &zero).op_norm(), 0.0);
        }
    }

    #[test]
    fn amplitude_below_both_ceilings() {
        let p = flagship();
        let g = GrowthRate::exponential();
        for i in -40..=40 {
            let t = i as f64 * 0.5;
            let a = p.amplitude(t);
            let pr = params();
            assert!(a <= pr.delta * g_envelope(&g, t, pr.gamma, pr.eps));
            assert!(a <= pr.lambda * dg_envelope(&g, t, pr.gamma, pr.eps, pr.xi) / (2.0 * p.weight(t)));
        }
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let p = flagship();
        let phi = Segment::from_fn(1.0, 2, 16, |w, o| {
            o[0] = w;
            o[1] = 2.0 + w * w;
        });
        let t = -1.3;
        let h = Segment::from_fn(1.0, 2, 16, |w, o| {
            o[0] = 1.0;
            o[1] = (3.0 * w).cos();
        });
        let eps = 1e-4;
        let mut plus = phi.clone();
        plus.axpy(eps, &h).unwrap();
        let mut minus = phi.clone();
        minus.axpy(-eps, &h).unwrap();
        let fd: Vec<f64> =
            p.g(t, &plus).iter().zip(p.g(t, &minus)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let an = p.d2g(t, &phi).apply(&h);
        for (a, b) in fd.iter().zip(&an) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn envelopes_hold_and_mu_version_binds() {
        let p = flagship();
        let rep = check_envelopes(&p, &GrowthRate::exponential(), &params(), 1.0, 16, (-10.0, 10.0), 400, 7, 0.0);
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.binding, "mu_norm");
        assert!(rep.worst_derivative > 1e-3);
    }

    #[test]
    fn envelope_violation_is_detected() {
        let p = flagship();
        let mut tight = params();
        tight.lambda *= 1e-3;
        let rep = check_envelopes(&p, &GrowthRate::exponential(), &tight, 1.0, 16, (-10.0, 10.0), 200, 7, 0.0);
        assert!(!rep.pass && rep.worst_derivative > 1.0);
    }

    #[test]
    fn op_norm_merges_equal_lags() {
        let f = PointFunctional::new(1, vec![(0.5, vec![1.0]), (0.5, vec![-1.0]), (1.0, vec![2.0])]);
        assert_eq!(f.op_norm(), 2.0);
        let g = PointFunctional::new(2, vec![(0.0, vec![1.0, -2.0, 0.0, 1.0]), (1.0, vec![0.5, 0.0, 0.0, 0.0])]);
        assert_eq!(g.op_norm(), 3.5);
    }
}
