//! Differentiable growth rates and the delay ratio bound `N(r)`.
//!
//! A growth rate is a strictly increasing `mu: R -> (0, inf)` with
//! `mu(0) = 1`, `mu -> 0` at `-inf` and `mu -> inf` at `+inf`. Everything
//! downstream only needs `mu`, `mu'`, its inverse (for the `u = mu(tau)`
//! substitution in quadratures) and a constant `N` with
//! `mu(s + r) / mu(s) <= N` for all `s`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Catalogue identifiers accepted in scenario files.
pub const CATALOGUE_IDS: [&str; 3] = ["exp", "poly", "log"];

#[derive(Clone)]
pub struct GrowthRate {
    label: String,
    eval: ScalarFn,
    deriv: ScalarFn,
    inverse: Option<ScalarFn>,
    closed_form_n: Option<ScalarFn>,
}

impl fmt::Debug for GrowthRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthRate")
            .field("label", &self.label)
            .field("closed_form_n", &self.closed_form_n.is_some())
            .finish()
    }
}

impl GrowthRate {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            inverse: None,
            closed_form_n: None,
        }
    }

    pub fn with_inverse(mut self, inverse: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.inverse = Some(Arc::new(inverse));
        self
    }

    pub fn with_closed_form_n(mut self, n: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.closed_form_n = Some(Arc::new(n));
        self
    }

    /// `mu(t) = e^t`, `N(r) = e^r`.
    pub fn exponential() -> Self {
        Self::new("exp", f64::exp, f64::exp)
            .with_inverse(f64::ln)
            .with_closed_form_n(f64::exp)
    }

    /// `mu(t) = t + 1` for `t >= 0` and `1 / (1 - t)` for `t <= 0`;
    /// `N(r) = r^2/4 + r + 1`.
    pub fn polynomial() -> Self {
        Self::new(
            "poly",
            |t| if t >= 0.0 { t + 1.0 } else { 1.0 / (1.0 - t) },
            |t| if t >= 0.0 { 1.0 } else { 1.0 / ((1.0 - t) * (1.0 - t)) },
        )
        .with_inverse(|u| if u >= 1.0 { u - 1.0 } else { 1.0 - 1.0 / u })
        .with_closed_form_n(|r| r * r / 4.0 + r + 1.0)
    }

    /// `mu(t) = ln(t + e)` for `t >= 0` and `1 / ln(e - t)` for `t <= 0`;
    /// `N(r) = ln^2(e + r/2)`.
    pub fn logarithmic() -> Self {
        use std::f64::consts::E;
        Self::new(
            "log",
            |t| if t >= 0.0 { (t + E).ln() } else { 1.0 / (E - t).ln() },
            |t| {
                if t >= 0.0 {
                    1.0 / (t + E)
                } else {
                    let l = (E - t).ln();
                    1.0 / ((E - t) * l * l)
                }
            },
        )
        .with_inverse(|u| if u >= 1.0 { u.exp() - E } else { E - (1.0 / u).exp() })
        .with_closed_form_n(|r| {
            let l = (E + r / 2.0).ln();
            l * l
        })
    }

    /// Looks up a catalogue rate by its scenario id (`"exp"`, `"poly"`, `"log"`).
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "exp" => Some(Self::exponential()),
            "poly" => Some(Self::polynomial()),
            "log" => Some(Self::logarithmic()),
            _ => None,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.eval)(t)
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        (self.deriv)(t)
    }

    /// `mu^{-1}(u)` for `u > 0`. Falls back to bisection when no closed form
    /// was supplied.
    pub fn inverse(&self, u: f64) -> f64 {
        if let Some(inv) = &self.inverse {
            return inv(u);
        }
        let (mut lo, mut hi) = (-1.0, 1.0);
        while self.eval(lo) > u {
            lo *= 2.0;
        }
        while self.eval(hi) < u {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn closed_form_n(&self, r: f64) -> Option<f64> {
        self.closed_form_n.as_ref().map(|n| n(r))
    }

    /// `mu(t)^{sgn(t) * exponent}` with `sgn(0) = 0`.
    #[inline]
    pub fn signed_power(&self, t: f64, exponent: f64) -> f64 {
        if t == 0.0 {
            1.0
        } else {
            self.eval(t).powf(sgn(t) * exponent)
        }
    }

    /// Checks the growth-rate invariants on `grid`: positivity, strict
    /// monotonicity, `mu(0) = 1`, and agreement of `deriv` with a central
    /// difference to relative tolerance `1e-6`.
    pub fn validate(&self, grid: &[f64]) -> std::result::Result<(), String> {
        if (self.eval(0.0) - 1.0).abs() > 1e-12 {
            return Err(format!("mu(0) = {} != 1", self.eval(0.0)));
        }
        let mut sorted = grid.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        for w in sorted.windows(2) {
            if self.eval(w[0]) >= self.eval(w[1]) {
                return Err(format!("mu not strictly increasing on [{}, {}]", w[0], w[1]));
            }
        }
        for &t in &sorted {
            let v = self.eval(t);
            if !(v > 0.0) {
                return Err(format!("mu({t}) = {v} is not positive"));
            }
            let h = 1e-7 * t.abs().max(1.0);
            let fd = (self.eval(t + h) - self.eval(t - h)) / (2.0 * h);
            let d = self.deriv(t);
            if (fd - d).abs() > 1e-6 * d.abs().max(1e-300) {
                return Err(format!("mu'({t}) = {d} but central difference gives {fd}"));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sgn(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The three catalogued rates: exponential, polynomial-type and
/// logarithmic-type, in that order.
pub fn builtin_catalogue() -> Vec<GrowthRate> {
    vec![
        GrowthRate::exponential(),
        GrowthRate::polynomial(),
        GrowthRate::logarithmic(),
    ]
}

fn check_inputs(r: f64, grid: &[f64]) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::NonPositiveDelay(r));
    }
    if grid.is_empty() {
        return Err(Error::DegenerateGrid);
    }
    Ok(())
}

#[inline]
fn ratio(g: &GrowthRate, s: f64, r: f64) -> f64 {
    g.eval(s + r) / g.eval(s)
}

/// Upper constant `N` for `mu(s + r) / mu(s)`: the larger of the closed form
/// (when known) and the sup over `grid` together with the candidate points
/// `-r/2`, `-r` and `0`.
pub fn ratio_bound_n(g: &GrowthRate, r: f64, grid: &[f64]) -> Result<f64> {
    check_inputs(r, grid)?;
    let scanned = grid
        .iter()
        .chain([-r / 2.0, -r, 0.0].iter())
        .map(|&s| ratio(g, s, r))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(match g.closed_form_n(r) {
        Some(n) => n.max(scanned),
        None => scanned,
    })
}

/// True iff `mu(s + r) / mu(s) <= n (1 + 1e-12)` at every grid point.
pub fn verify_property_h(g: &GrowthRate, r: f64, grid: &[f64], n: f64) -> Result<bool> {
    check_inputs(r, grid)?;
    Ok(grid.iter().all(|&s| ratio(g, s, r) <= n * (1.0 + 1e-12)))
}

/// Purely numerical sup of `mu(s + r) / mu(s)` over `[lo, hi]`: a uniform
/// scan with `points` nodes, then golden-section refinement in the cells
/// around the best node. Returns `(sup, argmax)`.
pub fn sup_ratio(g: &GrowthRate, r: f64, lo: f64, hi: f64, points: usize) -> Result<(f64, f64)> {
    if !(r > 0.0) {
        return Err(Error::NonPositiveDelay(r));
    }
    if points < 2 || !(hi > lo) {
        return Err(Error::DegenerateGrid);
    }
    let h = (hi - lo) / (points - 1) as f64;
    let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
    for i in 0..points {
        let v = ratio(g, lo + i as f64 * h, r);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let a = lo + best_i.saturating_sub(1) as f64 * h;
    let b = (lo + (best_i + 1) as f64 * h).min(hi);
    let (arg, val) = golden_max(|s| ratio(g, s, r), a, b, 1e-13);
    if val > best {
        Ok((val, arg))
    } else {
        Ok((best, lo + best_i as f64 * h))
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Uniform grid of `points` nodes on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let h = (hi - lo) / (points - 1) as f64;
            (0..points).map(|i| lo + i as f64 * h).collect()
        }
    }
}
