//! Nonuniform mu-dichotomies of split linear delay systems: projections,
//! the jump projections `P_0`/`Q_0`, backward evolution on the unstable
//! range, and a sampled certificate for the growth bounds.
//!
//! Models are block diagonal. Every unstable coordinate `k` is a decoupled
//! scalar equation `x_k' = F_k'(t) x_k` without delay, so its flow is
//! `Phi_k(t, s) = exp(F_k(t) - F_k(s))` and `U(s)` is spanned by
//! `u_k(s)(omega) = Phi_k(s + omega, s) e_k`. The stable block may carry
//! delays as long as it does not talk to the unstable coordinates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dde::{fundamental_jump, solution_op_T0, solution_op_T_with_step, LinearDelaySystem};
use crate::error::{Error, Result};
use crate::growth_rate::GrowthRate;
use crate::phase_space::{JumpSegment, Segment};

pub type LogFlow = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Stable,
    Unstable,
}

#[derive(Clone)]
pub struct Component {
    pub kind: ComponentKind,
    /// Primitive `F_k` of the diagonal coefficient, when known in closed form.
    pub log_flow: Option<LogFlow>,
}

impl std::fmt::Debug for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Component")
            .field("kind", &self.kind)
            .field("log_flow", &self.log_flow.is_some())
            .finish()
    }
}

impl Component {
    pub fn stable(log_flow: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { kind: ComponentKind::Stable, log_flow: Some(Arc::new(log_flow)) }
    }

    pub fn unstable(log_flow: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { kind: ComponentKind::Unstable, log_flow: Some(Arc::new(log_flow)) }
    }

    /// Stable coordinate whose flow is only available numerically.
    pub fn stable_numeric() -> Self {
        Self { kind: ComponentKind::Stable, log_flow: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyConstants {
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub nu: f64,
    pub k_tilde: f64,
    pub a: f64,
    pub eps: f64,
}

impl DichotomyConstants {
    /// Smallest `K` that covers the history part of `x_t` for split
    /// models: the segment looks back one delay, which costs `N^alpha`,
    /// and `P(s) phi` on an unstable coordinate can reach `2 |phi|`.
    pub fn split_model_k(n_ratio: f64, alpha: f64, has_unstable: bool) -> f64 {
        let k = n_ratio.powf(alpha);
        if has_unstable {
            2.0 * k
        } else {
            k
        }
    }
}

/// `D = max{K1, K~ N^a (1 + K1), K K~ N^{a+alpha+theta}, K K~ N^{a+alpha+eps}}`
/// with `K1 = K K~ N^{|a-beta|+nu}`.
pub fn derived_constant_d(c: &DichotomyConstants, n_ratio: f64) -> f64 {
    let kk = c.k * c.k_tilde;
    let k1 = kk * n_ratio.powf((c.a - c.beta).abs() + c.nu);
    let branches = [
        k1,
        c.k_tilde * n_ratio.powf(c.a) * (1.0 + k1),
        kk * n_ratio.powf(c.a + c.alpha + c.theta),
        kk * n_ratio.powf(c.a + c.alpha + c.eps),
    ];
    branches.into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct DichotomyModel {
    pub sys: LinearDelaySystem,
    pub growth: GrowthRate,
    pub components: Vec<Component>,
    pub constants: DichotomyConstants,
    /// Segment resolution used for every numerical operation.
    pub m: usize,
    unstable: Vec<usize>,
    stable: Vec<usize>,
}

const STRUCTURE_PROBES: [f64; 5] = [-7.3, -1.1, 0.0, 0.9, 6.7];

impl DichotomyModel {
    pub fn new(
        sys: LinearDelaySystem,
        growth: GrowthRate,
        components: Vec<Component>,
        constants: DichotomyConstants,
        m: usize,
    ) -> Result<Self> {
        if components.len() != sys.n {
            return Err(Error::DimensionMismatch { expected: sys.n, got: components.len() });
        }
        if m == 0 {
            return Err(Error::DegenerateGrid);
        }
        let unstable: Vec<usize> =
            (0..sys.n).filter(|&k| components[k].kind == ComponentKind::Unstable).collect();
        let stable: Vec<usize> =
            (0..sys.n).filter(|&k| components[k].kind == ComponentKind::Stable).collect();
        let model = Self { sys, growth, components, constants, m, unstable, stable };
        for &k in &model.unstable {
            if model.components[k].log_flow.is_none() {
                return Err(Error::Model(format!("unstable component {k} needs a log flow")));
            }
            if !model.is_decoupled(k) {
                return Err(Error::Model(format!(
                    "unstable component {k} must be a decoupled scalar equation without delay"
                )));
            }
        }
        for &k in &model.stable {
            if model.components[k].log_flow.is_some() && !model.is_decoupled(k) {
                return Err(Error::Model(format!(
                    "stable component {k} has a log flow but is coupled or delayed"
                )));
            }
        }
        Ok(model)
    }

    /// Row and column `k` vanish off the diagonal of the instantaneous term
    /// and entirely in the delayed terms, at a handful of probe times.
    fn is_decoupled(&self, k: usize) -> bool {
        let n = self.sys.n;
        let mut a = vec![0.0; n * n];
        for term in &self.sys.terms {
            for &t in &STRUCTURE_PROBES {
                (term.coef)(t, &mut a);
                for j in 0..n {
                    if term.lag == 0.0 && j == k {
                        continue;
                    }
                    if a[k * n + j] != 0.0 || a[j * n + k] != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Checks `F_k' = a_kk` by central differences on `grid`; returns the
    /// worst relative mismatch.
    pub fn log_flow_mismatch(&self, grid: &[f64]) -> f64 {
        let n = self.sys.n;
        let mut a = vec![0.0; n * n];
        let mut worst = 0.0f64;
        for (k, comp) in self.components.iter().enumerate() {
            let Some(f) = &comp.log_flow else { continue };
            for &t in grid {
                let mut diag = 0.0;
                for term in self.sys.terms.iter().filter(|term| term.lag == 0.0) {
                    (term.coef)(t, &mut a);
                    diag += a[k * n + k];
                }
                let h = 1e-5 * t.abs().max(1.0);
                let fd = (f(t + h) - f(t - h)) / (2.0 * h);
                worst = worst.max((fd - diag).abs() / diag.abs().max(1.0));
            }
        }
        worst
    }

    pub fn n(&self) -> usize {
        self.sys.n
    }

    pub fn r(&self) -> f64 {
        self.sys.r
    }

    pub fn step(&self) -> f64 {
        self.sys.r / self.m as f64
    }

    pub fn unstable_indices(&self) -> &[usize] {
        &self.unstable
    }

    pub fn stable_indices(&self) -> &[usize] {
        &self.stable
    }

    pub fn d_u(&self) -> usize {
        self.unstable.len()
    }

    /// True when every stable coordinate has a closed-form flow.
    pub fn stable_analytic(&self) -> bool {
        self.stable.iter().all(|&k| self.components[k].log_flow.is_some())
    }

    /// `Phi_k(t, s)` for a coordinate with a log flow.
    #[inline]
    pub fn flow(&self, k: usize, t: f64, s: f64) -> f64 {
        let f = self.components[k].log_flow.as_ref().expect("component without log flow");
        (f(t) - f(s)).exp()
    }

    /// `F_i(t)` for every coordinate; all coordinates need log flows.
    pub fn log_flows_into(&self, t: f64, out: &mut [f64]) {
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = (comp.log_flow.as_ref().expect("component without log flow"))(t);
        }
    }

    /// `M(t, s) c`: evolution of unstable coordinates, valid in both time
    /// directions. For `t <= s` this is the inverse `T~(t, s)`.
    pub fn unstable_backward(&self, t: f64, s: f64, c: &[f64]) -> Vec<f64> {
        self.unstable.iter().zip(c).map(|(&k, ck)| ck * self.flow(k, t, s)).collect()
    }

    /// `u_k(s)` for every unstable coordinate.
    pub fn unstable_basis(&self, s: f64) -> Vec<Segment> {
        let (r, n, m) = (self.r(), self.n(), self.m);
        self.unstable
            .iter()
            .map(|&k| Segment::from_fn(r, n, m, |w, out| out[k] = self.flow(k, s + w, s)))
            .collect()
    }

    /// `sum_k c_k u_k(s)`.
    pub fn realize(&self, s: f64, c: &[f64]) -> Segment {
        let (r, n, m) = (self.r(), self.n(), self.m);
        Segment::from_fn(r, n, m, |w, out| {
            for (&k, ck) in self.unstable.iter().zip(c) {
                out[k] = ck * self.flow(k, s + w, s);
            }
        })
    }

    /// `sup_omega Phi_k(t + omega, t)` on the segment grid, per unstable
    /// coordinate. `||sum c_k u_k(t)|| = max_k |c_k| s_k(t)`.
    pub fn basis_sup(&self, t: f64) -> Vec<f64> {
        let (r, m) = (self.r(), self.m);
        self.unstable
            .iter()
            .map(|&k| {
                (0..=m)
                    .map(|j| self.flow(k, t - r + j as f64 * r / m as f64, t))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Sup norm of the segment with unstable coordinates `c` at time `t`.
    pub fn coord_norm(&self, t: f64, c: &[f64]) -> f64 {
        self.basis_sup(t).iter().zip(c).map(|(s, c)| s * c.abs()).fold(0.0, f64::max)
    }

    /// `Q(s) phi = sum_k phi_k(0) u_k(s)`.
    pub fn apply_q(&self, s: f64, phi: &Segment) -> Segment {
        let c: Vec<f64> = self.unstable.iter().map(|&k| phi.head()[k]).collect();
        self.realize(s, &c)
    }

    pub fn apply_p(&self, s: f64, phi: &Segment) -> Segment {
        phi.sub(&self.apply_q(s, phi)).expect("shape")
    }

    /// Least-squares coordinates of `phi` in the unstable basis at `s`.
    pub fn coordinates(&self, s: f64, phi: &Segment) -> Result<Vec<f64>> {
        let d = self.d_u();
        if d == 0 {
            return Ok(vec![]);
        }
        let basis = self.unstable_basis(s);
        let rows = phi.values.len();
        let b = DMatrix::from_fn(rows, d, |i, j| basis[j].values[i]);
        let y = DVector::from_column_slice(&phi.values);
        let svd = b.clone().svd(true, true);
        let c = svd.solve(&y, 1e-14).map_err(|e| Error::Model(e.to_string()))?;
        let residual = (&b * &c - &y).amax() / phi.sup_norm().max(1.0);
        if !(residual <= 1e-6) {
            return Err(Error::SingularUnstableBasis { residual });
        }
        Ok(c.iter().copied().collect())
    }

    /// `Q_0(t) p = T~(t, t+r) Q(t+r) T_0(t+r, t) X_0 p`, computed numerically.
    #[allow(non_snake_case)]
    pub fn apply_Q0(&self, t: f64, p: &[f64]) -> Result<Segment> {
        self.check_dim(p.len())?;
        if self.d_u() == 0 {
            return Ok(Segment::zeros(self.r(), self.n(), self.m));
        }
        let r = self.r();
        let y = fundamental_jump(&self.sys, t + r, t, p, self.m)?;
        let qy = self.apply_q(t + r, &y.base);
        let c = self.coordinates(t + r, &qy)?;
        let back = self.unstable_backward(t, t + r, &c);
        Ok(self.realize(t, &back))
    }

    /// Closed form of [`Self::apply_Q0`] for split models: `sum_k p_k u_k(t)`.
    #[allow(non_snake_case)]
    pub fn apply_Q0_analytic(&self, t: f64, p: &[f64]) -> Segment {
        let c: Vec<f64> = self.unstable.iter().map(|&k| p[k]).collect();
        self.realize(t, &c)
    }

    /// `P_0(t) p = X_0 p - Q_0(t) p` as (continuous part, jump). Uses the
    /// closed form of `Q_0`: the unstable head then cancels exactly, while
    /// any integration error in it would grow along the unstable flow.
    #[allow(non_snake_case)]
    pub fn apply_P0(&self, t: f64, p: &[f64]) -> Result<JumpSegment> {
        self.check_dim(p.len())?;
        let q = self.apply_Q0_analytic(t, p);
        JumpSegment::new(q.scaled(-1.0), p.to_vec())
    }

    /// `[T_0(t, tau) P_0(tau) p](0)` for `t >= tau`.
    pub fn stable_kernel(&self, t: f64, tau: f64, p: &[f64]) -> Result<Vec<f64>> {
        if t < tau {
            return Err(Error::TimeOrder { t, s: tau });
        }
        if self.stable_analytic() {
            let mut out = vec![0.0; self.n()];
            for &k in &self.stable {
                out[k] = self.flow(k, t, tau) * p[k];
            }
            return Ok(out);
        }
        let p0 = self.apply_P0(tau, p)?;
        Ok(solution_op_T0(&self.sys, t, tau, &p0, self.step())?.head())
    }

    /// `[T~(t, tau) Q_0(tau) p](0)` for `t <= tau`.
    pub fn unstable_kernel(&self, t: f64, tau: f64, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for &k in &self.unstable {
            out[k] = self.flow(k, t, tau) * p[k];
        }
        out
    }

    pub fn derived_constant_d(&self, n_ratio: f64) -> f64 {
        derived_constant_d(&self.constants, n_ratio)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got });
        }
        Ok(())
    }

    fn hat(&self, j: usize, i: usize) -> Segment {
        let mut s = Segment::zeros(self.r(), self.n(), self.m);
        s.at_node_mut(j)[i] = 1.0;
        s
    }

    /// Induced sup norm of `T(t, s) P(s)` on the nodal discretization.
    pub fn norm_tp(&self, t: f64, s: f64) -> Result<f64> {
        let mut cols = Vec::new();
        for j in 0..=self.m {
            for i in 0..self.n() {
                let phi = self.apply_p(s, &self.hat(j, i));
                cols.push(solution_op_T_with_step(&self.sys, t, s, &phi, self.step())?.values);
            }
        }
        Ok(induced_norm(&cols))
    }

    /// Induced sup norm of `T_0(t, s)` on `C_0`, with coordinates
    /// (values at the nodes left of 0, left limit at 0, value at 0).
    pub fn norm_t0(&self, t: f64, s: f64) -> Result<f64> {
        let n = self.n();
        let mut cols = Vec::new();
        for j in 0..=self.m {
            for i in 0..n {
                let base = self.hat(j, i);
                let jump: Vec<f64> = base.head().iter().map(|v| -v).collect();
                cols.push(self.evolve_c0(t, s, JumpSegment::new(base, jump)?)?);
            }
        }
        for i in 0..n {
            let mut p = vec![0.0; n];
            p[i] = 1.0;
            cols.push(self.evolve_c0(t, s, JumpSegment::x0(self.r(), self.m, &p))?);
        }
        Ok(induced_norm(&cols))
    }

    /// Induced norm of `T_0(t, s) P_0(s)` as a map `R^n -> C_0`.
    pub fn norm_t0p0(&self, t: f64, s: f64) -> Result<f64> {
        let n = self.n();
        let mut cols = Vec::new();
        for i in 0..n {
            let mut p = vec![0.0; n];
            p[i] = 1.0;
            cols.push(self.evolve_c0(t, s, self.apply_P0(s, &p)?)?);
        }
        Ok(induced_norm(&cols))
    }

    /// `||T~(t, s) Q(s)||` for `t <= s`, exact for split models.
    pub fn norm_tq(&self, t: f64, s: f64) -> f64 {
        let sup = self.basis_sup(t);
        self.unstable
            .iter()
            .zip(&sup)
            .map(|(&k, sk)| self.flow(k, t, s) * sk)
            .fold(0.0, f64::max)
    }

    /// `||T~(t, s) Q_0(s)||` for `t <= s`; equal to [`Self::norm_tq`] since
    /// `Q_0(s) e_k = u_k(s)`.
    pub fn norm_tq0(&self, t: f64, s: f64) -> f64 {
        self.norm_tq(t, s)
    }

    /// Flattened samples of `T_0(t, s) phi` with the point value at 0 last.
    fn evolve_c0(&self, t: f64, s: f64, phi: JumpSegment) -> Result<Vec<f64>> {
        let out = solution_op_T0(&self.sys, t, s, &phi, self.step())?;
        let mut v = out.base.values.clone();
        v.extend(out.head());
        Ok(v)
    }
}

/// Largest absolute row sum of the matrix whose columns are `cols`.
fn induced_norm(cols: &[Vec<f64>]) -> f64 {
    let rows = cols.first().map_or(0, Vec::len);
    (0..rows).map(|r| cols.iter().map(|c| c[r].abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Stable,
    Unstable,
    BoundedGrowth,
    ProjectedJumpStable,
    ProjectedJumpUnstable,
}

impl BoundKind {
    pub const ALL: [BoundKind; 5] = [
        BoundKind::Stable,
        BoundKind::Unstable,
        BoundKind::BoundedGrowth,
        BoundKind::ProjectedJumpStable,
        BoundKind::ProjectedJumpUnstable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Stable => "stable",
            BoundKind::Unstable => "unstable",
            BoundKind::BoundedGrowth => "bounded_growth",
            BoundKind::ProjectedJumpStable => "projected_jump_stable",
            BoundKind::ProjectedJumpUnstable => "projected_jump_unstable",
        }
    }

    /// Unstable-side bounds are stated for `t <= s`.
    pub fn backward(self) -> bool {
        matches!(self, BoundKind::Unstable | BoundKind::ProjectedJumpUnstable)
    }
}

/// Right-hand side of each bound at `(t, s)`.
pub fn claimed_bound(
    kind: BoundKind,
    g: &GrowthRate,
    c: &DichotomyConstants,
    d: f64,
    t: f64,
    s: f64,
) -> f64 {
    let ratio = g.eval(t) / g.eval(s);
    match kind {
        BoundKind::Stable => c.k * ratio.powf(-c.alpha) * g.signed_power(s, c.theta),
        BoundKind::Unstable => c.k * ratio.powf(c.beta) * g.signed_power(s, c.nu),
        BoundKind::BoundedGrowth => c.k_tilde * ratio.powf(c.a) * g.signed_power(s, c.eps),
        BoundKind::ProjectedJumpStable => {
            d * ratio.powf(-c.alpha) * g.signed_power(s, c.theta + c.eps)
        }
        BoundKind::ProjectedJumpUnstable => {
            d * ratio.powf(c.beta) * g.signed_power(s, c.nu + c.eps)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound_name: String,
    pub worst_ratio: f64,
    /// `(t, s)` where the worst ratio was attained.
    pub argmax_pair: (f64, f64),
    pub pass: bool,
}

/// One sample of the stable bound, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSample {
    pub t: f64,
    pub s: f64,
    pub measured: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCertificate {
    pub window: (f64, f64),
    pub samples: usize,
    pub tolerance: f64,
    pub n_ratio: f64,
    pub d: f64,
    pub constants: DichotomyConstants,
    pub bounds: Vec<BoundCheck>,
    pub pass: bool,
    pub envelope_series: Vec<EnvelopeSample>,
}

impl DichotomyCertificate {
    pub fn bound(&self, kind: BoundKind) -> Option<&BoundCheck> {
        self.bounds.iter().find(|b| b.bound_name == kind.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateOptions {
    pub window: (f64, f64),
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self { window: (-10.0, 10.0), samples: 200, seed: 0, tolerance: 5e-2 }
    }
}

/// Random pairs `t >= s` in the window. Half are uniform; the other half
/// have `t - s <= 2r`, where the history term makes the bounds tightest.
pub fn sample_pairs(window: (f64, f64), r: f64, samples: usize, seed: u64) -> Vec<(f64, f64)> {
    let (lo, hi) = window;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|i| {
            if i % 2 == 0 {
                let (x, y) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
                (x.max(y), x.min(y))
            } else {
                let s = rng.gen_range(lo..=hi);
                let gap = rng.gen_range(0.0..=(2.0 * r).min(hi - s).max(0.0));
                (s + gap, s)
            }
        })
        .collect()
}

/// Measures every bound family on sampled pairs. Numerical failures show up
/// as infinite ratios rather than errors.
pub fn verify_bounds(
    model: &DichotomyModel,
    opts: &CertificateOptions,
    n_ratio: f64,
    d: f64,
) -> DichotomyCertificate {
    let pairs = sample_pairs(opts.window, model.r(), opts.samples, opts.seed);
    let c = model.constants;
    let g = &model.growth;
    let measured: Vec<[f64; 5]> = pairs
        .par_iter()
        .map(|&(t, s)| {
            let or_inf = |v: Result<f64>| v.unwrap_or(f64::INFINITY);
            [
                or_inf(model.norm_tp(t, s)),
                model.norm_tq(s, t),
                or_inf(model.norm_t0(t, s)),
                or_inf(model.norm_t0p0(t, s)),
                model.norm_tq0(s, t),
            ]
        })
        .collect();
    let mut bounds = Vec::new();
    let mut envelope_series = Vec::new();
    for (b, kind) in BoundKind::ALL.into_iter().enumerate() {
        let mut worst = (0.0f64, (f64::NAN, f64::NAN));
        for (&(t, s), meas) in pairs.iter().zip(&measured) {
            let (tt, ss) = if kind.backward() { (s, t) } else { (t, s) };
            let bound = claimed_bound(kind, g, &c, d, tt, ss);
            let ratio = if meas[b] == 0.0 { 0.0 } else { meas[b] / bound };
            let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
            if kind == BoundKind::Stable {
                envelope_series.push(EnvelopeSample { t, s, measured: meas[b], bound, ratio });
            }
            if ratio > worst.0 || worst.1 .0.is_nan() {
                worst = (ratio, (tt, ss));
            }
        }
        bounds.push(BoundCheck {
            bound_name: kind.name().into(),
            worst_ratio: worst.0,
            argmax_pair: worst.1,
            pass: worst.0 <= 1.0 + opts.tolerance,
        });
    }
    let pass = bounds.iter().all(|b| b.pass);
    DichotomyCertificate {
        window: opts.window,
        samples: opts.samples,
        tolerance: opts.tolerance,
        n_ratio,
        d,
        constants: c,
        bounds,
        pass,
        envelope_series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dde::DelayTerm;
    use approx::assert_relative_eq;

    fn consts() -> DichotomyConstants {
        DichotomyConstants {
            k: 1.0,
            alpha: 0.8,
            beta: 0.6,
            theta: 0.4,
            nu: 0.2,
            k_tilde: 1.0,
            a: 1.0,
            eps: 0.1,
        }
    }

    fn diag_2d() -> DichotomyModel {
        let g = GrowthRate::exponential();
        let sys = LinearDelaySystem::new(
            1.0,
            2,
            vec![DelayTerm::constant(0.0, vec![-0.8, 0.0, 0.0, 0.6])],
            "diag",
        )
        .unwrap();
        let comps = vec![Component::stable(|t| -0.8 * t), Component::unstable(|t| 0.6 * t)];
        DichotomyModel::new(sys, g, comps, consts(), 16).unwrap()
    }

    #[test]
    fn d_examples() {
        let e = std::f64::consts::E;
        assert_relative_eq!(derived_constant_d(&consts(), e), e.powf(2.2), max_relative = 1e-14);
        let uniform = DichotomyConstants { theta: 0.0, nu: 0.0, a: 0.0, eps: 0.0, ..consts() };
        assert_relative_eq!(derived_constant_d(&uniform, 1.0), 2.0);
        let c = DichotomyConstants { k_tilde: 3.0, ..consts() };
        assert!(derived_constant_d(&c, 1.3) >= 3.0);
    }

    #[test]
    fn rejects_coupled_unstable() {
        let sys = LinearDelaySystem::new(
            1.0,
            2,
            vec![DelayTerm::constant(0.0, vec![-1.0, 0.5, 0.0, 1.0])],
            "coupled",
        )
        .unwrap();
        let comps = vec![Component::stable_numeric(), Component::unstable(|t| t)];
        let err =
            DichotomyModel::new(sys, GrowthRate::exponential(), comps, consts(), 8).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
    }

    #[test]
    fn projections() {
        let m = diag_2d();
        let phi = Segment::from_fn(1.0, 2, 16, |w, out| {
            out[0] = (3.0 * w).sin();
            out[1] = 1.0 + w * w;
        });
        let p = m.apply_p(0.4, &phi);
        let q = m.apply_q(0.4, &phi);
        let mut sum = p.clone();
        sum.axpy(1.0, &q).unwrap();
        assert!(sum.sub(&phi).unwrap().sup_norm() < 1e-12);
        assert!(m.apply_p(0.4, &p).sub(&p).unwrap().sup_norm() < 1e-12);
        assert!(m.apply_q(0.4, &q).sub(&q).unwrap().sup_norm() < 1e-12);
        let c = m.unstable_backward(-2.0, 1.0, &m.unstable_backward(1.0, -2.0, &[0.7]));
        assert_relative_eq!(c[0], 0.7, max_relative = 1e-14);
    }

    #[test]
    fn q0_numeric_matches_closed_form() {
        let m = diag_2d();
        let q = m.apply_Q0(0.3, &[1.0, -2.0]).unwrap();
        let exact = m.apply_Q0_analytic(0.3, &[1.0, -2.0]);
        assert!(q.sub(&exact).unwrap().sup_norm() < 1e-7);
        assert!(q.values.chunks(2).all(|v| v[0] == 0.0));
        assert!(m.apply_Q0(0.3, &[0.0, 0.0]).unwrap().sup_norm() == 0.0);
        let p0 = m.apply_P0(0.3, &[1.0, -2.0]).unwrap();
        assert_relative_eq!(p0.head()[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn scalar_unstable_round_trip() {
        let beta = 0.6;
        let sys = LinearDelaySystem::scalar_ode(1.0, move |_| beta);
        let comps = vec![Component::unstable(move |t| beta * t)];
        let m = DichotomyModel::new(sys, GrowthRate::exponential(), comps, consts(), 16).unwrap();
        let q = m.apply_Q0(0.0, &[1.0]).unwrap();
        assert_relative_eq!(q.head()[0], 1.0, max_relative = 1e-8);
        assert_relative_eq!(q.at_node(0)[0], (-beta).exp(), max_relative = 1e-8);
    }

    #[test]
    fn norms_of_diagonal_model() {
        let m = diag_2d();
        // past one delay only the flows remain
        assert_relative_eq!(m.norm_tp(3.0, 1.0).unwrap(), (-0.8f64).exp(), max_relative = 1e-6);
        assert_relative_eq!(m.norm_tq(1.0, 3.0), (-1.2f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(m.norm_t0(3.0, 1.0).unwrap(), (1.2f64).exp(), max_relative = 1e-6);
        assert_relative_eq!(m.norm_t0p0(3.0, 1.0).unwrap(), (-0.8f64).exp(), max_relative = 1e-6);
    }

    #[test]
    fn certificate_monotone_in_constants() {
        let mut m = diag_2d();
        let e = std::f64::consts::E;
        m.constants.k = DichotomyConstants::split_model_k(e, 0.8, true);
        let d = m.derived_constant_d(e);
        let opts = CertificateOptions { samples: 20, ..Default::default() };
        let cert = verify_bounds(&m, &opts, e, d);
        assert!(cert.pass, "{:?}", cert.bounds);
        m.constants.k *= 1.5;
        m.constants.theta += 0.1;
        let looser = verify_bounds(&m, &opts, e, d * 2.0);
        assert!(looser.pass);
        for (a, b) in cert.bounds.iter().zip(&looser.bounds) {
            assert!(b.worst_ratio <= a.worst_ratio + 1e-12);
        }
    }
}
