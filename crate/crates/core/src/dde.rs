//! Method-of-steps RK4 integration of linear and perturbed delay equations
//! `x'(t) = sum_k A_k(t) x(t - r_k) + g(t, x_t)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::perturbation::Perturbation;
use crate::phase_space::{JumpSegment, Segment, SegmentView};

/// Writes the row-major `n x n` coefficient matrix at time `t`.
pub type CoefFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct DelayTerm {
    pub lag: f64,
    pub coef: CoefFn,
}

impl DelayTerm {
    pub fn new(lag: f64, coef: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { lag, coef: Arc::new(coef) }
    }

    pub fn constant(lag: f64, matrix: Vec<f64>) -> Self {
        Self::new(lag, move |_, out| out.copy_from_slice(&matrix))
    }
}

impl fmt::Debug for DelayTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DelayTerm").field("lag", &self.lag).finish_non_exhaustive()
    }
}

/// `L(t) phi = sum_k A_k(t) phi(-r_k)`.
#[derive(Debug, Clone)]
pub struct LinearDelaySystem {
    pub r: f64,
    pub n: usize,
    pub terms: Vec<DelayTerm>,
    pub label: String,
}

impl LinearDelaySystem {
    pub fn new(r: f64, n: usize, terms: Vec<DelayTerm>, label: impl Into<String>) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::NonPositiveDelay(r));
        }
        if n == 0 {
            return Err(Error::DegenerateGrid);
        }
        for term in &terms {
            if !(0.0..=r).contains(&term.lag) {
                return Err(Error::Model(format!("lag {} outside [0, {r}]", term.lag)));
            }
        }
        Ok(Self { r, n, terms, label: label.into() })
    }

    /// Scalar system `x' = a(t) x` without delays.
    pub fn scalar_ode(r: f64, a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let term = DelayTerm::new(0.0, move |t, out| out[0] = a(t));
        Self { r, n: 1, terms: vec![term], label: "scalar".into() }
    }

    /// `L(t) phi` for any view of `phi`.
    pub fn apply(&self, t: f64, phi: &dyn SegmentView, out: &mut [f64]) {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        let mut v = vec![0.0; n];
        out.iter_mut().for_each(|o| *o = 0.0);
        for term in &self.terms {
            (term.coef)(t, &mut a);
            phi.value_into(-term.lag, &mut v);
            matvec_add(&a, &v, out);
        }
    }

    fn check_step(&self, step: f64) -> Result<usize> {
        if !(step > 0.0) {
            return Err(Error::StepMisaligned { step, r: self.r });
        }
        let k = self.r / step;
        if (k - k.round()).abs() > 1e-12 * k.max(1.0) || k.round() < 1.0 {
            return Err(Error::StepMisaligned { step, r: self.r });
        }
        for term in &self.terms {
            if term.lag > 0.0 && term.lag < step * (1.0 - 1e-12) {
                return Err(Error::LagShorterThanStep { lag: term.lag, step });
            }
        }
        Ok(k.round() as usize)
    }
}

#[inline]
fn matvec_add(a: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] += row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    }
}

/// A computed solution on `[s - r, t_end]` with Hermite dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub s: f64,
    pub t_end: f64,
    pub step: f64,
    pub n: usize,
    initial: JumpSegment,
    xs: Vec<f64>,
    fl: Vec<f64>,
    fr: Vec<f64>,
}

impl Trajectory {
    pub fn r(&self) -> f64 {
        self.initial.base.r
    }

    /// Resolution of the segments returned by [`Trajectory::segment_at`].
    pub fn m(&self) -> usize {
        self.initial.base.m
    }

    pub fn initial(&self) -> &JumpSegment {
        &self.initial
    }

    /// Number of computed nodes `s + i * step`.
    pub fn nodes(&self) -> usize {
        self.xs.len() / self.n
    }

    pub fn node_state(&self, i: usize) -> &[f64] {
        &self.xs[i * self.n..(i + 1) * self.n]
    }

    /// `x(t)` for `t` in `[s - r, t_end]`; `t < s` reads the initial
    /// segment's left limit, `t >= s` the computed solution.
    pub fn state_into(&self, t: f64, out: &mut [f64]) {
        if t < self.s {
            self.initial.base.value_into(t - self.s, out);
            return;
        }
        self.computed_into(t, out);
    }

    pub fn state(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.state_into(t, &mut out);
        out
    }

    fn computed_into(&self, t: f64, out: &mut [f64]) {
        partial_into(self, self.nodes(), t, out);
    }

    /// The segment `x_t`, sampled on the initial segment's grid.
    pub fn segment_at(&self, t: f64) -> Result<Segment> {
        if t < self.s - 1e-12 {
            return Err(Error::TimeOrder { t, s: self.s });
        }
        if t > self.t_end + 1e-9 {
            return Err(Error::TimeOrder { t: self.t_end, s: t });
        }
        let m = self.m();
        let mut seg = Segment::zeros(self.r(), self.n, m);
        for j in 0..=m {
            let w = seg.node(j);
            let n = self.n;
            self.state_into(t + w, &mut seg.values[j * n..(j + 1) * n]);
        }
        Ok(seg)
    }

    /// Lazy view of `x_t`.
    pub fn view_at(&self, t: f64) -> TrajectoryView<'_> {
        TrajectoryView { traj: self, t }
    }
}

#[derive(Clone, Copy)]
pub struct TrajectoryView<'a> {
    traj: &'a Trajectory,
    t: f64,
}

impl SegmentView for TrajectoryView<'_> {
    fn delay(&self) -> f64 {
        self.traj.r()
    }

    fn dim(&self) -> usize {
        self.traj.n
    }

    fn value_into(&self, omega: f64, out: &mut [f64]) {
        self.traj.state_into(self.t + omega, out);
    }
}

// History seen from inside an RK4 stage at time `tau` of the step that
// started at `t_win`: linear between the last accepted node and the stage
// value on (t_last, tau]. Reads landing exactly on `s` from a window that
// started left of `s` see the left limit, so jump data stays a jump.
struct StageView<'a> {
    traj: &'a Trajectory,
    nodes: usize,
    t_last: f64,
    x_last: &'a [f64],
    t_win: f64,
    tau: f64,
    y: &'a [f64],
}

impl StageView<'_> {
    fn read(&self, u: f64, out: &mut [f64]) {
        let s = self.traj.s;
        let tol = 1e-12 * (1.0 + s.abs());
        if u < s - tol || (u <= s + tol && u - (self.tau - self.t_win) < s - tol) {
            self.traj.initial.base.value_into((u - s).min(0.0), out);
        } else if u <= self.t_last || self.tau <= self.t_last {
            partial_into(self.traj, self.nodes, u.min(self.t_last), out);
        } else {
            let f = (u - self.t_last) / (self.tau - self.t_last);
            for k in 0..out.len() {
                out[k] = self.x_last[k] + f * (self.y[k] - self.x_last[k]);
            }
        }
    }
}

impl SegmentView for StageView<'_> {
    fn delay(&self) -> f64 {
        self.traj.r()
    }

    fn dim(&self) -> usize {
        self.traj.n
    }

    fn value_into(&self, omega: f64, out: &mut [f64]) {
        self.read(self.tau + omega, out);
    }
}

// Hermite dense output over the first `nodes` accepted nodes, using the
// right derivative at the left end and the left derivative at the right end
// so kinks at `s + k r_j` are respected.
fn partial_into(traj: &Trajectory, nodes: usize, t: f64, out: &mut [f64]) {
    let n = traj.n;
    let x = (t - traj.s) / traj.step;
    let xr = x.round();
    if (x - xr).abs() < 1e-9 && xr >= 0.0 && (xr as usize) < nodes {
        out.copy_from_slice(&traj.xs[xr as usize * n..(xr as usize + 1) * n]);
        return;
    }
    let last = nodes - 1;
    if last == 0 {
        out.copy_from_slice(&traj.xs[..n]);
        return;
    }
    let i = (x.floor().max(0.0) as usize).min(last - 1);
    let th = (x - i as f64).clamp(0.0, 1.0);
    let h = traj.step;
    let (x0, x1) = (&traj.xs[i * n..(i + 1) * n], &traj.xs[(i + 1) * n..(i + 2) * n]);
    let (f0, f1) = (&traj.fr[i * n..(i + 1) * n], &traj.fl[(i + 1) * n..(i + 2) * n]);
    let t2 = th * th;
    let t3 = t2 * th;
    for k in 0..n {
        out[k] = (2.0 * t3 - 3.0 * t2 + 1.0) * x0[k]
            + (t3 - 2.0 * t2 + th) * h * f0[k]
            + (-2.0 * t3 + 3.0 * t2) * x1[k]
            + (t3 - t2) * h * f1[k];
    }
}

struct Rhs<'a> {
    sys: &'a LinearDelaySystem,
    pert: Option<&'a dyn Perturbation>,
    a: Vec<f64>,
    v: Vec<f64>,
    gbuf: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(
        &mut self,
        traj: &Trajectory,
        nodes: usize,
        t_win: f64,
        tau: f64,
        y: &[f64],
        out: &mut [f64],
    ) {
        let n = traj.n;
        let view = StageView {
            traj,
            nodes,
            t_last: traj.s + (nodes - 1) as f64 * traj.step,
            x_last: &traj.xs[(nodes - 1) * n..nodes * n],
            t_win,
            tau,
            y,
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        for term in &self.sys.terms {
            (term.coef)(tau, &mut self.a);
            if term.lag == 0.0 {
                matvec_add(&self.a, y, out);
            } else {
                view.read(tau - term.lag, &mut self.v);
                matvec_add(&self.a, &self.v, out);
            }
        }
        if let Some(p) = self.pert {
            p.g_into(tau, &view, &mut self.gbuf);
            out.iter_mut().zip(&self.gbuf).for_each(|(o, g)| *o += g);
        }
    }
}

/// Core integrator. `initial` may carry a jump at `omega = 0`.
pub fn integrate(
    sys: &LinearDelaySystem,
    pert: Option<&dyn Perturbation>,
    s: f64,
    initial: &JumpSegment,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if t_end < s {
        return Err(Error::TimeOrder { t: t_end, s });
    }
    if initial.base.n != sys.n {
        return Err(Error::DimensionMismatch { expected: sys.n, got: initial.base.n });
    }
    if (initial.base.r - sys.r).abs() > 1e-12 * sys.r {
        return Err(Error::Model(format!(
            "segment delay {} differs from system delay {}",
            initial.base.r, sys.r
        )));
    }
    sys.check_step(step)?;
    let n = sys.n;
    let span = (t_end - s) / step;
    let steps = if span - span.floor() < 1e-9 { span.floor() as usize } else { span.ceil() as usize };
    let mut traj = Trajectory {
        s,
        t_end,
        step,
        n,
        initial: initial.clone(),
        xs: Vec::with_capacity((steps + 1) * n),
        fl: Vec::with_capacity((steps + 1) * n),
        fr: Vec::with_capacity((steps + 1) * n),
    };
    let x0 = initial.head();
    traj.xs.extend_from_slice(&x0);
    let mut rhs = Rhs { sys, pert, a: vec![0.0; n * n], v: vec![0.0; n], gbuf: vec![0.0; n] };
    let mut f = vec![0.0; n];
    rhs.eval(&traj, 1, s, s, &x0, &mut f);
    traj.fl.extend_from_slice(&f);
    traj.fr.extend_from_slice(&f);

    let (mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut y = vec![0.0; n];
    for i in 0..steps {
        let t_i = s + i as f64 * step;
        let nodes = i + 1;
        let x_i: Vec<f64> = traj.node_state(i).to_vec();
        let k1: Vec<f64> = traj.fr[i * n..(i + 1) * n].to_vec();
        for k in 0..n {
            y[k] = x_i[k] + 0.5 * step * k1[k];
        }
        rhs.eval(&traj, nodes, t_i, t_i + 0.5 * step, &y, &mut k2);
        for k in 0..n {
            y[k] = x_i[k] + 0.5 * step * k2[k];
        }
        rhs.eval(&traj, nodes, t_i, t_i + 0.5 * step, &y, &mut k3);
        for k in 0..n {
            y[k] = x_i[k] + step * k3[k];
        }
        rhs.eval(&traj, nodes, t_i, t_i + step, &y, &mut k4);
        for k in 0..n {
            y[k] = x_i[k] + step / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
        let t_next = t_i + step;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_next });
        }
        rhs.eval(&traj, nodes, t_i, t_next, &y, &mut f);
        traj.xs.extend_from_slice(&y);
        traj.fl.extend_from_slice(&f);
        traj.fr.extend_from_slice(&f);
        rhs.eval(&traj, nodes + 1, t_next, t_next, &y, &mut f);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_next });
        }
        traj.fr[(i + 1) * n..(i + 2) * n].copy_from_slice(&f);
    }
    Ok(traj)
}

/// Solves `x' = L(t) x_t` from a continuous initial segment.
pub fn solve_linear(
    sys: &LinearDelaySystem,
    s: f64,
    phi: &Segment,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let init = JumpSegment { base: phi.clone(), jump: vec![0.0; phi.n] };
    integrate(sys, None, s, &init, t_end, step)
}

/// Same as [`solve_linear`] for data in `C_0`.
pub fn solve_linear_jump(
    sys: &LinearDelaySystem,
    s: f64,
    phi: &JumpSegment,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    integrate(sys, None, s, phi, t_end, step)
}

/// Default integration step: the segment grid spacing `r / m`.
pub fn default_step(phi: &Segment) -> f64 {
    phi.r / phi.m as f64
}

/// `T(t, s) phi`.
#[allow(non_snake_case)]
pub fn solution_op_T(sys: &LinearDelaySystem, t: f64, s: f64, phi: &Segment) -> Result<Segment> {
    solution_op_T_with_step(sys, t, s, phi, default_step(phi))
}

#[allow(non_snake_case)]
pub fn solution_op_T_with_step(
    sys: &LinearDelaySystem,
    t: f64,
    s: f64,
    phi: &Segment,
    step: f64,
) -> Result<Segment> {
    if t < s {
        return Err(Error::TimeOrder { t, s });
    }
    if t == s {
        return Ok(phi.clone());
    }
    solve_linear(sys, s, phi, t, step)?.segment_at(t)
}

/// `T_0(t, s) X_0 p` on a grid with `m` intervals. At `t = s` the result
/// is `X_0 p` itself; for `t > s` the jump part is zero.
pub fn fundamental_jump(
    sys: &LinearDelaySystem,
    t: f64,
    s: f64,
    p: &[f64],
    m: usize,
) -> Result<JumpSegment> {
    if t < s {
        return Err(Error::TimeOrder { t, s });
    }
    let x0 = JumpSegment::x0(sys.r, m, p);
    if t == s {
        return Ok(x0);
    }
    let traj = integrate(sys, None, s, &x0, t, sys.r / m as f64)?;
    Ok(JumpSegment { base: traj.segment_at(t)?, jump: vec![0.0; sys.n] })
}

/// `T_0(t, s) phi` for general `C_0` data.
#[allow(non_snake_case)]
pub fn solution_op_T0(
    sys: &LinearDelaySystem,
    t: f64,
    s: f64,
    phi: &JumpSegment,
    step: f64,
) -> Result<JumpSegment> {
    if t < s {
        return Err(Error::TimeOrder { t, s });
    }
    if t == s {
        return Ok(phi.clone());
    }
    let traj = integrate(sys, None, s, phi, t, step)?;
    Ok(JumpSegment { base: traj.segment_at(t)?, jump: vec![0.0; sys.n] })
}

/// `R(t, s) phi` for `x' = L(t) x_t + g(t, x_t)`.
#[allow(non_snake_case)]
pub fn solve_perturbed_R(
    sys: &LinearDelaySystem,
    pert: &dyn Perturbation,
    t: f64,
    s: f64,
    phi: &Segment,
    step: f64,
) -> Result<Segment> {
    if t < s {
        return Err(Error::TimeOrder { t, s });
    }
    if t == s {
        return Ok(phi.clone());
    }
    let init = JumpSegment { base: phi.clone(), jump: vec![0.0; phi.n] };
    integrate(sys, Some(pert), s, &init, t, step)?.segment_at(t)
}

/// Full perturbed trajectory, for callers that need more than the end
/// segment.
pub fn solve_perturbed(
    sys: &LinearDelaySystem,
    pert: &dyn Perturbation,
    s: f64,
    phi: &Segment,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let init = JumpSegment { base: phi.clone(), jump: vec![0.0; phi.n] };
    integrate(sys, Some(pert), s, &init, t_end, step)
}
