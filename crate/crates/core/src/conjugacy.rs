//! Fixed-point construction of the conjugacy `h^t = Id + eta(t, .)` on the
//! unstable ranges, together with its derivative in the unstable
//! coordinates.
//!
//! A point `b` of `U(t)` is stored through its coordinates `c` (values of the
//! unstable components at `omega = 0`). The segment `eta(t, b)` is never
//! stored: along the orbit of `b` it satisfies
//! `eta(t, b)(omega) = eta0(t + omega, M(t + omega, t) c)`, so a single
//! vector field `eta0(t, c)` in `R^n` on a `(t, c)` tensor grid carries all
//! of it. The same holds for the derivative `deta0 = d eta0 / dc`.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admissibility::{sup_contraction_factor, ParamSet};
use crate::dde::{solution_op_T_with_step, solve_perturbed_R};
use crate::dichotomy::DichotomyModel;
use crate::error::{Error, Result};
use crate::growth_rate::linspace;
use crate::perturbation::Perturbation;
use crate::phase_space::{mu_weight, Segment, SegmentView};
use crate::quadrature::{lower_cut, mu_log_nodes, upper_cut, TruncationPolicy};

/// Largest supported unstable dimension.
pub const MAX_DU: usize = 4;
/// Largest supported state dimension.
pub const MAX_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    /// Every unstable coordinate up to `|c| <= c_max` is on the grid at
    /// every grid time.
    pub c_max: f64,
    /// Number of points of the stretched coordinate `zeta`.
    pub c_points: usize,
    /// At time `t` coordinate `k` is `c_scale Phi_k(t, 0) sinh(zeta)`.
    pub c_scale: f64,
}

impl GridSpec {
    /// Coordinate extent needed so that orbits started with `|c| <= b_max`
    /// stay on the grid for `horizon` time units anywhere in the window.
    pub fn orbit_extent(model: &DichotomyModel, t_min: f64, t_max: f64, b_max: f64, horizon: f64) -> f64 {
        let mut grow = 1.0f64;
        for t in linspace(t_min, t_max, 201) {
            for &k in model.unstable_indices() {
                grow = grow.max(model.flow(k, t + horizon, t));
            }
        }
        b_max * grow
    }
}

/// `eta0` and `deta0` on a `(t, zeta)` tensor grid.
///
/// The coordinate grid at time `t_j` is `c = S_k(t_j) sinh(zeta)` with
/// `S_k(t) = c_scale Phi_k(t, 0)`: orbits are resolved by their coordinate
/// at time 0, where the perturbation envelopes peak, and the sinh stretch
/// reaches far out cheaply where `eta0` saturates. Between grid times each
/// slice is transported along the linear flow before blending, so the
/// interpolant is exact wherever `g` vanishes. Outside the time range both
/// fields are zero; coordinates beyond the grid are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaField {
    pub n: usize,
    pub d_u: usize,
    pub unstable: Vec<usize>,
    pub t_grid: Vec<f64>,
    pub zeta_grid: Vec<f64>,
    /// `scales[j * d_u + k] = S_k(t_j)`.
    pub scales: Vec<f64>,
    /// `log_flows[j * n + i] = F_i(t_j)`.
    pub log_flows: Vec<f64>,
    /// `values[p * n + i]` at grid point `p`.
    pub values: Vec<f64>,
    /// `deriv[(p * n + i) * d_u + k] = d eta0_i / d c_k`.
    pub deriv: Vec<f64>,
}

struct Slice {
    j: usize,
    w: f64,
    ci: [usize; MAX_DU],
    fc: [f64; MAX_DU],
    /// `Phi_i(t, t_j)`.
    out_flow: [f64; MAX_N],
    /// `Phi_k(t_j, t)` for unstable `k`.
    in_flow: [f64; MAX_DU],
}

impl EtaField {
    pub fn zeros(model: &DichotomyModel, grid: &GridSpec) -> Result<Self> {
        let (n, d_u) = (model.n(), model.d_u());
        if grid.t_points < 2 || (d_u > 0 && grid.c_points < 2) || !(grid.t_max > grid.t_min) {
            return Err(Error::DegenerateGrid);
        }
        if d_u > MAX_DU || n > MAX_N {
            return Err(Error::Model(format!("dimensions beyond {MAX_N} / {MAX_DU} unsupported")));
        }
        if !(grid.c_scale > 0.0 && grid.c_max > 0.0) {
            return Err(Error::Config("c_scale and c_max must be positive".into()));
        }
        let t_grid = linspace(grid.t_min, grid.t_max, grid.t_points);
        let unstable = model.unstable_indices().to_vec();
        let mut scales = Vec::new();
        let mut log_flows = vec![0.0; t_grid.len() * n];
        for (j, &t) in t_grid.iter().enumerate() {
            for &k in &unstable {
                scales.push(grid.c_scale * model.flow(k, t, 0.0));
            }
            model.log_flows_into(t, &mut log_flows[j * n..(j + 1) * n]);
        }
        let zeta_grid = if d_u == 0 {
            vec![0.0]
        } else {
            let smallest = scales.iter().copied().fold(f64::INFINITY, f64::min);
            let z = (grid.c_max / smallest).asinh();
            linspace(-z, z, grid.c_points)
        };
        let points = t_grid.len() * zeta_grid.len().pow(d_u as u32);
        Ok(Self {
            n,
            d_u,
            unstable,
            t_grid,
            zeta_grid,
            scales,
            log_flows,
            values: vec![0.0; points * n],
            deriv: vec![0.0; points * n * d_u],
        })
    }

    pub fn c_count(&self) -> usize {
        self.zeta_grid.len().pow(self.d_u as u32)
    }

    pub fn points(&self) -> usize {
        self.t_grid.len() * self.c_count()
    }

    fn multi_index(&self, p: usize) -> [usize; MAX_DU] {
        let nc = self.zeta_grid.len();
        let mut rest = p % self.c_count();
        let mut idx = [0usize; MAX_DU];
        for k in (0..self.d_u).rev() {
            idx[k] = rest % nc;
            rest /= nc;
        }
        idx
    }

    /// Grid point `p` as `(t, c)`.
    pub fn point(&self, p: usize) -> (f64, Vec<f64>) {
        let j = p / self.c_count();
        let idx = self.multi_index(p);
        let c = (0..self.d_u)
            .map(|k| self.scales[j * self.d_u + k] * self.zeta_grid[idx[k]].sinh())
            .collect();
        (self.t_grid[j], c)
    }

    pub fn value(&self, p: usize) -> &[f64] {
        &self.values[p * self.n..(p + 1) * self.n]
    }

    pub fn deriv_at(&self, p: usize) -> &[f64] {
        let w = self.n * self.d_u;
        &self.deriv[p * w..(p + 1) * w]
    }

    /// The (at most two) time slices around `t` with transported
    /// coordinates. `lf` holds `F_i(t)`.
    fn slices(&self, t: f64, lf: &[f64], c: &[f64]) -> ([Option<Slice>; 2], bool) {
        let (t0, tn) = (self.t_grid[0], *self.t_grid.last().unwrap());
        if !(t >= t0 && t <= tn) {
            return ([None, None], false);
        }
        let nt = self.t_grid.len();
        let x = (t - t0) / ((tn - t0) / (nt - 1) as f64);
        let ti = (x.floor() as usize).min(nt - 2);
        let ft = x - ti as f64;
        let mut clamped = false;
        let mut make = |j: usize, w: f64| -> Option<Slice> {
            if w == 0.0 {
                return None;
            }
            let lfj = &self.log_flows[j * self.n..(j + 1) * self.n];
            let mut s = Slice {
                j,
                w,
                ci: [0; MAX_DU],
                fc: [0.0; MAX_DU],
                out_flow: [0.0; MAX_N],
                in_flow: [0.0; MAX_DU],
            };
            for i in 0..self.n {
                s.out_flow[i] = (lf[i] - lfj[i]).exp();
            }
            let nz = self.zeta_grid.len();
            let (z0, zn) = (self.zeta_grid[0], self.zeta_grid[nz - 1]);
            for (k, &u) in self.unstable.iter().enumerate() {
                s.in_flow[k] = 1.0 / s.out_flow[u];
                let mut z = (c[k] * s.in_flow[k] / self.scales[j * self.d_u + k]).asinh();
                if !(z >= z0 && z <= zn) {
                    clamped = true;
                    z = z.clamp(z0, zn);
                }
                let y = (z - z0) / ((zn - z0) / (nz - 1) as f64);
                let ci = (y.floor() as usize).min(nz - 2);
                s.ci[k] = ci;
                s.fc[k] = y - ci as f64;
            }
            Some(s)
        };
        let slices = [make(ti, 1.0 - ft), make(ti + 1, ft)];
        (slices, clamped)
    }

    /// Calls `f(point, weight)` for every interpolation corner of a slice.
    #[inline]
    fn corners(&self, s: &Slice, mut f: impl FnMut(usize, f64)) {
        let nc = self.zeta_grid.len();
        for mask in 0..(1usize << self.d_u) {
            let mut w = s.w;
            let mut idx = 0;
            for k in 0..self.d_u {
                let b = (mask >> k) & 1;
                w *= if b == 1 { s.fc[k] } else { 1.0 - s.fc[k] };
                idx = idx * nc + s.ci[k] + b;
            }
            if w != 0.0 {
                f(s.j * self.c_count() + idx, w);
            }
        }
    }

    /// Adds `eta0(t, c)` to `out`, given `lf = F(t)`; returns whether `c`
    /// was clamped.
    pub fn add_value(&self, t: f64, lf: &[f64], c: &[f64], out: &mut [f64]) -> bool {
        let (slices, clamped) = self.slices(t, lf, c);
        let n = self.n;
        for s in slices.iter().flatten() {
            self.corners(s, |p, w| {
                for i in 0..n {
                    out[i] += w * s.out_flow[i] * self.values[p * n + i];
                }
            });
        }
        clamped
    }

    /// Adds `scale * d eta0(t, c) / d c_k` to `out`, given `lf = F(t)`.
    pub fn add_deriv_column(
        &self,
        t: f64,
        lf: &[f64],
        c: &[f64],
        k: usize,
        scale: f64,
        out: &mut [f64],
    ) -> bool {
        let (slices, clamped) = self.slices(t, lf, c);
        let (n, du) = (self.n, self.d_u);
        for s in slices.iter().flatten() {
            let f = scale * s.in_flow[k];
            self.corners(s, |p, w| {
                for i in 0..n {
                    out[i] += f * w * s.out_flow[i] * self.deriv[(p * n + i) * du + k];
                }
            });
        }
        clamped
    }

    pub fn value_at(&self, model: &DichotomyModel, t: f64, c: &[f64]) -> Vec<f64> {
        let mut lf = vec![0.0; self.n];
        model.log_flows_into(t, &mut lf);
        let mut out = vec![0.0; self.n];
        self.add_value(t, &lf, c, &mut out);
        out
    }

    /// `d eta0 / dc` at `(t, c)`, row-major `n x d_u`.
    pub fn deriv_value_at(&self, model: &DichotomyModel, t: f64, c: &[f64]) -> Vec<f64> {
        let mut lf = vec![0.0; self.n];
        model.log_flows_into(t, &mut lf);
        let mut out = vec![0.0; self.n * self.d_u];
        let mut col = vec![0.0; self.n];
        for k in 0..self.d_u {
            col.iter_mut().for_each(|v| *v = 0.0);
            self.add_deriv_column(t, &lf, c, k, 1.0, &mut col);
            for i in 0..self.n {
                out[i * self.d_u + k] = col[i];
            }
        }
        out
    }

    /// The segment `eta(t, b)` for `b` with coordinates `c` in `U(s)`, read
    /// along the orbit: `omega -> eta0(t + omega, M(t + omega, s) c)`.
    pub fn segment(&self, model: &DichotomyModel, t: f64, s: f64, c: &[f64]) -> Segment {
        let mut lf = vec![0.0; self.n];
        Segment::from_fn(model.r(), self.n, model.m, |w, out| {
            let cc = model.unstable_backward(t + w, s, c);
            model.log_flows_into(t + w, &mut lf);
            self.add_value(t + w, &lf, &cc, out);
        })
    }

    pub fn minus(&self, other: &EtaField) -> EtaField {
        let mut d = self.clone();
        d.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a -= b);
        d.deriv.iter_mut().zip(&other.deriv).for_each(|(a, b)| *a -= b);
        d
    }

    /// Sup and weighted norms over the grid, every segment sampled on the
    /// model's segment grid.
    pub fn norms(&self, model: &DichotomyModel, xi: f64, eps: f64) -> EtaNorms {
        let (r, m, n, du) = (model.r(), model.m, self.n, self.d_u);
        let per_point: Vec<(f64, f64, f64)> = (0..self.points())
            .into_par_iter()
            .map(|p| {
                let (t, c) = self.point(p);
                let sup_b = model.basis_sup(t);
                let (mut sup, mut dsup) = (0.0f64, 0.0f64);
                let mut lf = vec![0.0; n];
                let mut v = vec![0.0; n];
                let mut dv = vec![0.0; n * du];
                let mut col = vec![0.0; n];
                for j in 0..=m {
                    let sigma = t - r + j as f64 * r / m as f64;
                    model.log_flows_into(sigma, &mut lf);
                    let cc = model.unstable_backward(sigma, t, &c);
                    v.iter_mut().for_each(|x| *x = 0.0);
                    self.add_value(sigma, &lf, &cc, &mut v);
                    sup = v.iter().fold(sup, |a, x| a.max(x.abs()));
                    if du > 0 {
                        let flows = model.unstable_backward(sigma, t, &vec![1.0; du]);
                        for k in 0..du {
                            col.iter_mut().for_each(|x| *x = 0.0);
                            self.add_deriv_column(sigma, &lf, &cc, k, flows[k] / sup_b[k], &mut col);
                            for i in 0..n {
                                dv[i * du + k] = col[i];
                            }
                        }
                        for row in dv.chunks(du) {
                            dsup = dsup.max(row.iter().map(|x| x.abs()).sum());
                        }
                    }
                }
                let w = mu_weight(&model.growth, t, xi, eps);
                (sup, sup * w, dsup * w)
            })
            .collect();
        let fold = |f: fn(&(f64, f64, f64)) -> f64| per_point.iter().map(f).fold(0.0, f64::max);
        let sup = fold(|x| x.0);
        let sup_mu = fold(|x| x.1);
        let deriv_sup_mu = fold(|x| x.2);
        EtaNorms { sup, sup_mu, deriv_sup_mu, one_mu: sup_mu + deriv_sup_mu }
    }

    /// Largest mismatch between the stored derivative and finite
    /// differences of the stored values, relative to the largest stored
    /// derivative entry at the same time. Differences are taken with the
    /// five-point stencil in the uniform `zeta` variable and mapped back with
    /// `dzeta/dc = 1 / (S cosh zeta)`.
    pub fn derivative_consistency(&self) -> f64 {
        if self.d_u == 0 {
            return 0.0;
        }
        let (n, du, cc) = (self.n, self.d_u, self.c_count());
        let nc = self.zeta_grid.len();
        if nc < 5 {
            return 0.0;
        }
        let hz = self.zeta_grid[1] - self.zeta_grid[0];
        let mut worst = 0.0f64;
        for j in 0..self.t_grid.len() {
            let slice = &self.deriv[j * cc * n * du..(j + 1) * cc * n * du];
            let scale = slice.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if scale == 0.0 {
                continue;
            }
            for p in j * cc..(j + 1) * cc {
                let idx = self.multi_index(p);
                for k in 0..du {
                    if idx[k] < 2 || idx[k] + 2 >= nc {
                        continue;
                    }
                    let st = nc.pow((du - 1 - k) as u32);
                    let dc_dz = self.scales[j * du + k] * self.zeta_grid[idx[k]].cosh();
                    for i in 0..n {
                        let v = |q: usize| self.values[q * n + i];
                        let dz = (v(p - 2 * st) - 8.0 * v(p - st) + 8.0 * v(p + st) - v(p + 2 * st))
                            / (12.0 * hz);
                        let fd = dz / dc_dz;
                        worst = worst.max((fd - self.deriv[(p * n + i) * du + k]).abs() / scale);
                    }
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaNorms {
    pub sup: f64,
    pub sup_mu: f64,
    pub deriv_sup_mu: f64,
    pub one_mu: f64,
}

/// Quadrature layout for one time `t`: nodes of both improper integrals
/// with the kernel diagonal (weight, sign and flow) folded in, and cached
/// unstable flows `Phi_k(tau - r_l, t)` at every probe lag.
struct Row {
    t: f64,
    taus: Vec<f64>,
    kdiag: Vec<f64>,
    lags: Vec<f64>,
    phis: Vec<f64>,
    /// `F_i(tau_j - r_l)`.
    lfs: Vec<f64>,
}

/// `omega -> y(tau + omega)` along the orbit of `c` through time `t`,
/// with `y(sigma) = sum_k (M(sigma, t) c)_k e_k + eta0(sigma, M(sigma, t) c)`.
struct OrbitView<'a> {
    model: &'a DichotomyModel,
    field: &'a EtaField,
    row: &'a Row,
    j: usize,
    c: &'a [f64],
    /// `Some(k)`: the direction `d y / d c_k` instead of `y`.
    direction: Option<usize>,
    clamps: &'a Cell<(u64, u64)>,
}

impl OrbitView<'_> {
    /// `Phi_k(sigma, t)` for unstable `k` and `F_i(sigma)`, `sigma = tau_j + omega`.
    #[inline]
    fn flows(&self, omega: f64, phi: &mut [f64; MAX_DU], lf: &mut [f64; MAX_N]) {
        let (n, du) = (self.field.n, self.field.d_u);
        let nl = self.row.lags.len();
        for (l, &lag) in self.row.lags.iter().enumerate() {
            if (omega + lag).abs() < 1e-12 {
                let at = self.j * nl + l;
                phi[..du].copy_from_slice(&self.row.phis[at * du..(at + 1) * du]);
                lf[..n].copy_from_slice(&self.row.lfs[at * n..(at + 1) * n]);
                return;
            }
        }
        let sigma = self.row.taus[self.j] + omega;
        for (k, &u) in self.model.unstable_indices().iter().enumerate() {
            phi[k] = self.model.flow(u, sigma, self.row.t);
        }
        self.model.log_flows_into(sigma, &mut lf[..n]);
    }
}

impl SegmentView for OrbitView<'_> {
    fn delay(&self) -> f64 {
        self.model.r()
    }

    fn dim(&self) -> usize {
        self.field.n
    }

    fn value_into(&self, omega: f64, out: &mut [f64]) {
        let du = self.field.d_u;
        let mut phi = [0.0; MAX_DU];
        let mut lf = [0.0; MAX_N];
        self.flows(omega, &mut phi, &mut lf);
        let lf = &lf[..self.field.n];
        let mut cc = [0.0; MAX_DU];
        for k in 0..du {
            cc[k] = self.c[k] * phi[k];
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let sigma = self.row.taus[self.j] + omega;
        let clamped = match self.direction {
            None => {
                for (k, &u) in self.model.unstable_indices().iter().enumerate() {
                    out[u] = cc[k];
                }
                self.field.add_value(sigma, lf, &cc[..du], out)
            }
            Some(k) => {
                out[self.model.unstable_indices()[k]] = phi[k];
                self.field.add_deriv_column(sigma, lf, &cc[..du], k, phi[k], out)
            }
        };
        let (a, b) = self.clamps.get();
        self.clamps.set((a + clamped as u64, b + 1));
    }
}

/// The fixed-point operator for one model, perturbation and parameter set.
pub struct Conjugacy<'a> {
    pub model: &'a DichotomyModel,
    pub pert: &'a dyn Perturbation,
    pub params: ParamSet,
    pub trunc: TruncationPolicy,
}

/// `F(eta)(t, c)` and `dF(eta)/dc (t, c)` (row-major `n x d_u`) at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValue {
    pub value: Vec<f64>,
    pub deriv: Vec<f64>,
}

impl<'a> Conjugacy<'a> {
    pub fn new(
        model: &'a DichotomyModel,
        pert: &'a dyn Perturbation,
        params: ParamSet,
        trunc: TruncationPolicy,
    ) -> Result<Self> {
        if !model.stable_analytic() {
            return Err(Error::Model(
                "the conjugacy solver needs closed-form flows on the stable block".into(),
            ));
        }
        if pert.dim() != model.n() {
            return Err(Error::DimensionMismatch { expected: model.n(), got: pert.dim() });
        }
        if model.d_u() > MAX_DU || model.n() > MAX_N {
            return Err(Error::Model(format!("dimensions beyond {MAX_N} / {MAX_DU} unsupported")));
        }
        Ok(Self { model, pert, params, trunc })
    }

    fn row(&self, t: f64) -> Result<Row> {
        let model = self.model;
        let g = &model.growth;
        let n = model.n();
        let du = model.d_u();
        let p = &self.params;
        let scale = (p.d * p.delta).max(f64::MIN_POSITIVE);
        let lags = self.pert.probe_lags();
        let mut breaks = vec![0.0];
        breaks.extend(lags.iter().copied().filter(|&l| l > 0.0));
        let mut taus = Vec::new();
        let mut kdiag = Vec::new();
        if self.pert.is_zero() {
            return Ok(Row { t, taus, kdiag, lags: vec![], phis: vec![], lfs: vec![] });
        }
        if !model.stable_indices().is_empty() {
            let lo = lower_cut(g, t, scale, p.alpha, &self.trunc)?;
            for (tau, w) in mu_log_nodes(g, lo, t, self.trunc.panel_width, &breaks) {
                taus.push(tau);
                let mut kd = vec![0.0; n];
                for &k in model.stable_indices() {
                    kd[k] = w * model.flow(k, t, tau);
                }
                kdiag.extend(kd);
            }
        }
        if du > 0 {
            let hi = upper_cut(g, t, scale, p.beta, &self.trunc)?;
            for (tau, w) in mu_log_nodes(g, t, hi, self.trunc.panel_width, &breaks) {
                taus.push(tau);
                let mut kd = vec![0.0; n];
                for &k in model.unstable_indices() {
                    kd[k] = -w * model.flow(k, t, tau);
                }
                kdiag.extend(kd);
            }
        }
        let mut phis = Vec::with_capacity(taus.len() * lags.len() * du);
        let mut lfs = vec![0.0; taus.len() * lags.len() * n];
        for (j, &tau) in taus.iter().enumerate() {
            for (l, &lag) in lags.iter().enumerate() {
                for &k in model.unstable_indices() {
                    phis.push(model.flow(k, tau - lag, t));
                }
                let at = (j * lags.len() + l) * n;
                model.log_flows_into(tau - lag, &mut lfs[at..at + n]);
            }
        }
        Ok(Row { t, taus, kdiag, lags, phis, lfs })
    }

    fn eval_in_row(
        &self,
        row: &Row,
        field: &EtaField,
        c: &[f64],
        value: &mut [f64],
        deriv: &mut [f64],
        clamps: &Cell<(u64, u64)>,
    ) {
        let n = self.model.n();
        let du = self.model.d_u();
        value.iter_mut().for_each(|v| *v = 0.0);
        deriv.iter_mut().for_each(|v| *v = 0.0);
        if self.pert.is_zero() {
            return;
        }
        let mut gv = vec![0.0; n];
        let mut dg = vec![0.0; n];
        for (j, &tau) in row.taus.iter().enumerate() {
            let kd = &row.kdiag[j * n..(j + 1) * n];
            let view = OrbitView { model: self.model, field, row, j, c, direction: None, clamps };
            self.pert.g_into(tau, &view, &mut gv);
            for i in 0..n {
                value[i] += kd[i] * gv[i];
            }
            if du == 0 {
                continue;
            }
            let lin = self.pert.d2g(tau, &view);
            for k in 0..du {
                let dir = OrbitView { direction: Some(k), ..view };
                lin.apply_into(&dir, &mut dg);
                for i in 0..n {
                    deriv[i * du + k] += kd[i] * dg[i];
                }
            }
        }
    }

    /// `F(eta)(t, b)(0)` and its `c`-derivative, evaluated directly.
    pub fn point(&self, field: &EtaField, t: f64, c: &[f64]) -> Result<PointValue> {
        let (n, du) = (self.model.n(), self.model.d_u());
        if c.len() != du {
            return Err(Error::DimensionMismatch { expected: du, got: c.len() });
        }
        let row = self.row(t)?;
        let mut pv = PointValue { value: vec![0.0; n], deriv: vec![0.0; n * du] };
        let clamps = Cell::new((0, 0));
        self.eval_in_row(&row, field, c, &mut pv.value, &mut pv.deriv, &clamps);
        Ok(pv)
    }

    /// The segment `F(eta)(t, b)`.
    #[allow(non_snake_case)]
    pub fn F_apply(&self, field: &EtaField, t: f64, c: &[f64]) -> Result<Segment> {
        let model = self.model;
        let mut seg = Segment::zeros(model.r(), model.n(), model.m);
        for j in 0..=model.m {
            let sigma = t + seg.node(j);
            let cc = model.unstable_backward(sigma, t, c);
            let pv = self.point(field, sigma, &cc)?;
            seg.at_node_mut(j).copy_from_slice(&pv.value);
        }
        Ok(seg)
    }

    /// `dF(eta)/db (t, b)` as one segment per unstable coordinate direction.
    #[allow(non_snake_case)]
    pub fn dF_db_apply(&self, field: &EtaField, t: f64, c: &[f64]) -> Result<Vec<Segment>> {
        let model = self.model;
        let (n, du) = (model.n(), model.d_u());
        let mut cols = vec![Segment::zeros(model.r(), n, model.m); du];
        for j in 0..=model.m {
            let sigma = t + cols.first().map_or(0.0, |s| s.node(j));
            let cc = model.unstable_backward(sigma, t, c);
            let flows = model.unstable_backward(sigma, t, &vec![1.0; du]);
            let pv = self.point(field, sigma, &cc)?;
            for (k, col) in cols.iter_mut().enumerate() {
                for i in 0..n {
                    col.at_node_mut(j)[i] = pv.deriv[i * du + k] * flows[k];
                }
            }
        }
        Ok(cols)
    }

    /// One Picard sweep `eta -> F(eta)` on the grid of `field`. Returns the
    /// new field and the fraction of clamped coordinate lookups.
    pub fn sweep(&self, field: &EtaField) -> Result<(EtaField, f64)> {
        let (n, du) = (self.model.n(), self.model.d_u());
        let cc = field.c_count();
        let rows: Vec<Result<(Vec<f64>, Vec<f64>, (u64, u64))>> = field
            .t_grid
            .par_iter()
            .enumerate()
            .map(|(ti, &t)| {
                let row = self.row(t)?;
                let mut vals = vec![0.0; cc * n];
                let mut ders = vec![0.0; cc * n * du];
                let clamps = Cell::new((0, 0));
                for ci in 0..cc {
                    let (_, c) = field.point(ti * cc + ci);
                    self.eval_in_row(
                        &row,
                        field,
                        &c,
                        &mut vals[ci * n..(ci + 1) * n],
                        &mut ders[ci * n * du..(ci + 1) * n * du],
                        &clamps,
                    );
                }
                Ok((vals, ders, clamps.get()))
            })
            .collect();
        let mut next = field.clone();
        next.values.clear();
        next.deriv.clear();
        let (mut clamped, mut total) = (0u64, 0u64);
        for r in rows {
            let (v, d, (a, b)) = r?;
            next.values.extend(v);
            next.deriv.extend(d);
            clamped += a;
            total += b;
        }
        let rate = if total == 0 { 0.0 } else { clamped as f64 / total as f64 };
        Ok((next, rate))
    }

    /// Picard iteration from `eta = 0`.
    pub fn picard_solve(&self, grid: &GridSpec, opts: &SolverOptions) -> Result<ConjugacyResult> {
        let p = &self.params;
        let mut eta = EtaField::zeros(self.model, grid)?;
        let mut sweeps: Vec<SweepRecord> = Vec::new();
        let mut converged = false;
        let mut clamp_rate = 0.0f64;
        for k in 0..opts.max_sweeps {
            let (next, rate) = self.sweep(&eta)?;
            clamp_rate = clamp_rate.max(rate);
            let diff = next.minus(&eta).norms(self.model, p.xi, p.eps);
            let ratio = sweeps.last().and_then(|prev| {
                (prev.delta_one_mu > 0.0).then(|| diff.one_mu / prev.delta_one_mu)
            });
            sweeps.push(SweepRecord { k, delta_one_mu: diff.one_mu, delta_sup: diff.sup, ratio });
            eta = next;
            let last_two: Vec<f64> = sweeps.iter().rev().take(2).filter_map(|s| s.ratio).collect();
            if last_two.len() == 2 && last_two.iter().all(|&r| r >= 1.0) {
                return Err(Error::NotContracting {
                    sweep: k,
                    ratios: sweeps.iter().filter_map(|s| s.ratio).collect(),
                });
            }
            if diff.one_mu <= opts.tol {
                converged = true;
                break;
            }
        }
        let norms = eta.norms(self.model, p.xi, p.eps);
        let measured = sweeps.iter().filter_map(|s| s.ratio).fold(0.0, f64::max);
        Ok(ConjugacyResult {
            norms,
            contraction_rate_measured: measured,
            contraction_rate_theoretical: p.q / (1.0 + p.q),
            sup_contraction_theoretical: sup_contraction_factor(p),
            derivative_margin: 1.0 - norms.deriv_sup_mu,
            converged,
            sweeps,
            clamp_rate,
            tol: opts.tol,
            derivative_consistency: eta.derivative_consistency(),
            residual_grid: vec![],
            eta,
        })
    }

    /// `||F(eta) - eta||_{1,mu}` on the grid of `eta`.
    pub fn fixed_point_residual(&self, eta: &EtaField) -> Result<f64> {
        let (next, _) = self.sweep(eta)?;
        Ok(next.minus(eta).norms(self.model, self.params.xi, self.params.eps).one_mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_sweeps: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    /// `||eta_{k+1} - eta_k||_{1,mu}`.
    pub delta_one_mu: f64,
    pub delta_sup: f64,
    /// `delta_k / delta_{k-1}`.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub t: f64,
    pub s: f64,
    pub c: Vec<f64>,
    pub raw: f64,
    pub mu: f64,
    /// The same quantity with `eta = 0`.
    pub baseline_raw: f64,
    pub baseline_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyResult {
    pub eta: EtaField,
    pub norms: EtaNorms,
    pub sweeps: Vec<SweepRecord>,
    pub converged: bool,
    pub tol: f64,
    pub contraction_rate_measured: f64,
    pub contraction_rate_theoretical: f64,
    pub sup_contraction_theoretical: f64,
    pub derivative_margin: f64,
    pub derivative_consistency: f64,
    pub clamp_rate: f64,
    pub residual_grid: Vec<Residual>,
}

/// Both sides of `h^t T(t, s) b = R(t, s) h^s b` for `b` with coordinates
/// `c` in `U(s)`.
pub fn conjugacy_sides(
    field: &EtaField,
    model: &DichotomyModel,
    pert: &dyn Perturbation,
    t: f64,
    s: f64,
    c: &[f64],
    with_eta: bool,
) -> Result<(Segment, Segment)> {
    if t < s {
        return Err(Error::TimeOrder { t, s });
    }
    let b = model.realize(s, c);
    let mut lhs = solution_op_T_with_step(&model.sys, t, s, &b, model.step())?;
    let mut start = b;
    if with_eta {
        lhs.axpy(1.0, &field.segment(model, t, s, c))?;
        start.axpy(1.0, &field.segment(model, s, s, c))?;
    }
    let rhs = solve_perturbed_R(&model.sys, pert, t, s, &start, model.step())?;
    Ok((lhs, rhs))
}

pub fn conjugacy_residual(
    field: &EtaField,
    model: &DichotomyModel,
    pert: &dyn Perturbation,
    params: &ParamSet,
    t: f64,
    s: f64,
    c: &[f64],
) -> Result<Residual> {
    let w = mu_weight(&model.growth, t, params.xi, params.eps);
    let (l, r) = conjugacy_sides(field, model, pert, t, s, c, true)?;
    let raw = l.sub(&r)?.sup_norm();
    let (l0, r0) = conjugacy_sides(field, model, pert, t, s, c, false)?;
    let base = l0.sub(&r0)?.sup_norm();
    Ok(Residual { t, s, c: c.to_vec(), raw, mu: raw * w, baseline_raw: base, baseline_mu: base * w })
}

/// Random `(t, s, c)` with `s <= t <= s + horizon`, chosen so that every
/// segment involved lies on the time grid, and `|c_k| <= b_max`.
pub fn sample_triples(
    field: &EtaField,
    r: f64,
    horizon: f64,
    b_max: f64,
    samples: usize,
    seed: u64,
) -> Vec<(f64, f64, Vec<f64>)> {
    let lo = field.t_grid[0] + r;
    let hi = (*field.t_grid.last().unwrap() - horizon).max(lo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let s = rng.gen_range(lo..=hi);
            let t = s + rng.gen_range(0.0..=horizon);
            let c = (0..field.d_u).map(|_| rng.gen_range(-b_max..=b_max)).collect();
            (t, s, c)
        })
        .collect()
}

pub fn residual_table(
    field: &EtaField,
    model: &DichotomyModel,
    pert: &dyn Perturbation,
    params: &ParamSet,
    triples: &[(f64, f64, Vec<f64>)],
) -> Result<Vec<Residual>> {
    triples
        .par_iter()
        .map(|(t, s, c)| conjugacy_residual(field, model, pert, params, *t, *s, c))
        .collect()
}

/// Splitting `[s, t]` at `tau`, the residual over `[s, t]` is bounded by
/// the residual over `[tau, t]` from the evolved point plus the residual
/// over `[s, tau]` propagated by the measured Lipschitz factor of
/// `R(t, tau)` between the two states involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub whole: f64,
    pub late: f64,
    pub early: f64,
    pub lipschitz: f64,
}

impl Coherence {
    pub fn holds(&self, slack: f64) -> bool {
        self.whole <= self.late + self.lipschitz * self.early + slack
    }
}

pub fn semigroup_coherence(
    field: &EtaField,
    model: &DichotomyModel,
    pert: &dyn Perturbation,
    t: f64,
    tau: f64,
    s: f64,
    c: &[f64],
) -> Result<Coherence> {
    if !(s <= tau && tau <= t) {
        return Err(Error::TimeOrder { t, s });
    }
    let step = model.step();
    let (lw, rw) = conjugacy_sides(field, model, pert, t, s, c, true)?;
    let (le, re) = conjugacy_sides(field, model, pert, tau, s, c, true)?;
    let c_tau = model.unstable_backward(tau, s, c);
    let (ll, rl) = conjugacy_sides(field, model, pert, t, tau, &c_tau, true)?;
    let early = le.sub(&re)?.sup_norm();
    let moved = solve_perturbed_R(&model.sys, pert, t, tau, &le, step)?
        .sub(&solve_perturbed_R(&model.sys, pert, t, tau, &re, step)?)?
        .sup_norm();
    Ok(Coherence {
        whole: lw.sub(&rw)?.sup_norm(),
        late: ll.sub(&rl)?.sup_norm(),
        early,
        lipschitz: if early > 0.0 { moved / early } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityReport {
    pub derivative_norm: f64,
    pub margin: f64,
    /// For one unstable dimension: `c -> c + eta0_u(t, c)` is strictly
    /// increasing on the grid at every grid time.
    pub monotone: Option<bool>,
    pub min_slope: Option<f64>,
    pub pass: bool,
}

pub fn invertibility_check(result: &ConjugacyResult, model: &DichotomyModel) -> InvertibilityReport {
    let eta = &result.eta;
    let margin = result.derivative_margin;
    let (mut monotone, mut min_slope) = (None, None);
    if eta.d_u == 1 {
        let u = model.unstable_indices()[0];
        let nc = eta.zeta_grid.len();
        let mut slope = f64::INFINITY;
        for ti in 0..eta.t_grid.len() {
            for ci in 0..nc - 1 {
                let p = ti * nc + ci;
                let (ca, cb) = (eta.point(p).1[0], eta.point(p + 1).1[0]);
                let a = ca + eta.value(p)[u];
                let b = cb + eta.value(p + 1)[u];
                slope = slope.min((b - a) / (cb - ca));
            }
        }
        monotone = Some(slope > 0.0);
        min_slope = Some(slope);
    }
    InvertibilityReport {
        derivative_norm: result.norms.deriv_sup_mu,
        margin,
        monotone,
        min_slope,
        pass: margin > 0.0 && monotone.unwrap_or(true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dde::{DelayTerm, LinearDelaySystem};
    use crate::dichotomy::{Component, DichotomyConstants};
    use crate::growth_rate::GrowthRate;
    use crate::perturbation::ZeroPerturbation;
    use approx::assert_relative_eq;

    fn model() -> DichotomyModel {
        let sys = LinearDelaySystem::new(
            1.0,
            2,
            vec![DelayTerm::constant(0.0, vec![-0.8, 0.0, 0.0, 0.6])],
            "diag",
        )
        .unwrap();
        let c = DichotomyConstants {
            k: 2.0 * 0.8f64.exp(),
            alpha: 0.8,
            beta: 0.6,
            theta: 0.4,
            nu: 0.2,
            k_tilde: 1.0,
            a: 1.0,
            eps: 0.1,
        };
        let comps = vec![Component::stable(|t| -0.8 * t), Component::unstable(|t| 0.6 * t)];
        DichotomyModel::new(sys, GrowthRate::exponential(), comps, c, 8).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec { t_min: -2.0, t_max: 2.0, t_points: 9, c_max: 1.0, c_points: 5, c_scale: 0.5 }
    }

    #[test]
    fn orbit_aligned_interpolation_is_exact_on_linear_orbits() {
        let m = model();
        let g = GridSpec { c_points: 41, ..grid() };
        let mut f = EtaField::zeros(&m, &g).unwrap();
        // eta0 = (e^{-0.8 t}, e^{0.6 t} asinh(c / S(t))), linear in zeta
        // along each orbit
        let exact = |t: f64, c: f64| {
            [(-0.8 * t).exp(), (0.6 * t).exp() * (c / (0.5 * (0.6 * t).exp())).asinh()]
        };
        for p in 0..f.points() {
            let (t, c) = f.point(p);
            let v = exact(t, c[0]);
            f.values[2 * p..2 * p + 2].copy_from_slice(&v);
            let s = 0.5 * (0.6 * t).exp();
            f.deriv[2 * p + 1] = (0.6 * t).exp() / (s * s + c[0] * c[0]).sqrt();
        }
        for (t, c) in [(0.3, 0.1), (-1.77, -0.05), (1.9, 0.8)] {
            let got = f.value_at(&m, t, &[c]);
            let want = exact(t, c);
            assert_relative_eq!(got[0], want[0], max_relative = 1e-12);
            assert_relative_eq!(got[1], want[1], max_relative = 1e-12);
        }
        assert_eq!(f.value_at(&m, 2.5, &[0.1]), vec![0.0, 0.0]);
        // clamped beyond the coordinate range
        let far = f.value_at(&m, 0.0, &[1e6]);
        assert_relative_eq!(far[1], f.zeta_grid.last().unwrap(), max_relative = 1e-12);
        assert!(f.derivative_consistency() < 1e-2, "{}", f.derivative_consistency());
    }

    #[test]
    fn zero_perturbation_gives_zero() {
        let m = model();
        let z = ZeroPerturbation::new(2);
        let p = ParamSet {
            alpha: 0.8,
            beta: 0.6,
            theta: 0.4,
            nu: 0.2,
            eps: 0.1,
            a: 1.0,
            gamma: 0.5,
            xi: 0.6,
            delta: 1e-3,
            lambda: 1e-5,
            q: 1.0,
            k: m.constants.k,
            k_tilde: 1.0,
            n: std::f64::consts::E,
            d: 2.0 * 3f64.exp(),
        };
        let conj = Conjugacy::new(&m, &z, p, TruncationPolicy::default()).unwrap();
        let res = conj.picard_solve(&grid(), &SolverOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.sweeps.len(), 1);
        assert_eq!(res.norms.one_mu, 0.0);
        assert_eq!(res.derivative_margin, 1.0);
        let f = conj.F_apply(&res.eta, 0.3, &[0.7]).unwrap();
        assert_eq!(f.sup_norm(), 0.0);
        let r = conjugacy_residual(&res.eta, &m, &z, &p, 1.0, 0.0, &[0.5]).unwrap();
        assert!(r.raw <= 1e-12);
    }
}
