//! Composite Gauss-Legendre rules, including rules on half-lines laid out
//! in `v = ln mu(tau)` with certified tail truncation.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth_rate::GrowthRate;

/// Nodes and weights of the `k`-point Gauss-Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=k {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = k as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[k - 1 - i] = x;
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    (nodes, weights)
}

/// The 16-point rule, computed once.
pub fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Appends the nodes and weights of `GL16` on `[a, b]`.
pub fn push_panel(a: f64, b: f64, out: &mut Vec<(f64, f64)>) {
    let (x, w) = gl16();
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    out.extend(x.iter().zip(w).map(|(x, w)| (c + h * x, h * w)));
}

/// Composite `GL16` over `[a, b]` with panels no wider than `width`,
/// split at every breakpoint strictly inside.
pub fn composite_nodes(a: f64, b: f64, width: f64, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(b);
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let k = (len / width).ceil().max(1.0) as usize;
        let h = len / k as f64;
        for i in 0..k {
            push_panel(w[0] + i as f64 * h, w[0] + (i + 1) as f64 * h, &mut out);
        }
    }
    out
}

pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, width: f64, breaks: &[f64]) -> f64 {
    composite_nodes(a, b, width, breaks).into_iter().map(|(x, w)| w * f(x)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationPolicy {
    /// Bound on each discarded tail.
    pub tail_tol: f64,
    /// Largest admissible `tau` distance from `t` on either side.
    pub max_span: f64,
    /// Panel width in `v = ln mu(tau)`.
    pub panel_width: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { tail_tol: 1e-9, max_span: 200.0, panel_width: 1.0 }
    }
}

/// Lower cut for `int_{-inf}^t` against the envelope
/// `c mu(tau)^{rate - 1} mu'(tau) mu(t)^{-rate}`: the discarded part equals
/// `(c / rate) (mu(tau_lo) / mu(t))^rate <= tail_tol`.
pub fn lower_cut(g: &GrowthRate, t: f64, c: f64, rate: f64, p: &TruncationPolicy) -> Result<f64> {
    let excess = (c / (rate * p.tail_tol)).ln().max(0.0) / rate;
    let tau = g.inverse((g.eval(t).ln() - excess).exp());
    if !(t - tau <= p.max_span) || !tau.is_finite() {
        return Err(Error::TruncationUnreachable { needed: t - tau, max_span: p.max_span });
    }
    Ok(tau)
}

/// Upper cut for `int_t^inf` against `c mu(tau)^{-rate - 1} mu'(tau) mu(t)^rate`.
pub fn upper_cut(g: &GrowthRate, t: f64, c: f64, rate: f64, p: &TruncationPolicy) -> Result<f64> {
    let excess = (c / (rate * p.tail_tol)).ln().max(0.0) / rate;
    let tau = g.inverse((g.eval(t).ln() + excess).exp());
    if !(tau - t <= p.max_span) || !tau.is_finite() {
        return Err(Error::TruncationUnreachable { needed: tau - t, max_span: p.max_span });
    }
    Ok(tau)
}

/// `GL16` nodes for `int_{a}^{b} f(tau) dtau` laid out uniformly in
/// `v = ln mu(tau)` (the substitution `u = mu(tau)` on a log scale), with the
/// Jacobian `mu / mu'` folded into the weights. Breakpoints are given in `tau`.
pub fn mu_log_nodes(
    g: &GrowthRate,
    a: f64,
    b: f64,
    panel_width: f64,
    breaks: &[f64],
) -> Vec<(f64, f64)> {
    if b <= a {
        return vec![];
    }
    let v = |tau: f64| g.eval(tau).ln();
    let vb: Vec<f64> = breaks.iter().filter(|&&x| x > a && x < b).map(|&x| v(x)).collect();
    composite_nodes(v(a), v(b), panel_width, &vb)
        .into_iter()
        .map(|(vv, w)| {
            let tau = g.inverse(vv.exp());
            (tau, w * g.eval(tau) / g.deriv(tau))
        })
        .collect()
}
