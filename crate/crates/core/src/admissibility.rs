//! Scalar hypotheses on the dichotomy exponents, the `xi` window and the
//! ceilings on the perturbation size `delta` and derivative size `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub nu: f64,
    pub eps: f64,
    pub a: f64,
    pub gamma: f64,
    pub xi: f64,
    pub delta: f64,
    pub lambda: f64,
    pub q: f64,
    pub k: f64,
    pub k_tilde: f64,
    pub n: f64,
    pub d: f64,
}

impl ParamSet {
    /// Sign and positivity requirements on every field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("q", self.q),
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("K", self.k),
            ("K_tilde", self.k_tilde),
            ("N", self.n),
            ("D", self.d),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("theta", self.theta), ("nu", self.nu), ("eps", self.eps), ("a", self.a)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = ">=")]
    GreaterEq,
    #[serde(rename = "<=")]
    LessEq,
    #[serde(rename = "in")]
    Inside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub relation: Relation,
    /// For `Inside` the open interval `(rhs, rhs_hi)`.
    pub rhs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhs_hi: Option<f64>,
    pub pass: bool,
}

impl Inequality {
    fn new(name: &str, lhs: f64, relation: Relation, rhs: f64) -> Self {
        let pass = match relation {
            Relation::Greater => lhs > rhs,
            Relation::GreaterEq => lhs >= rhs,
            Relation::LessEq => lhs <= rhs,
            Relation::Inside => unreachable!(),
        };
        Self { name: name.into(), lhs, relation, rhs, rhs_hi: None, pass }
    }

    fn inside(name: &str, x: f64, lo: f64, hi: f64) -> Self {
        let pass = lo < x && x < hi;
        Self { name: name.into(), lhs: x, relation: Relation::Inside, rhs: lo, rhs_hi: Some(hi), pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub entries: Vec<Inequality>,
    pub pass: bool,
}

impl AdmissibilityReport {
    fn from_entries(entries: Vec<Inequality>) -> Self {
        let pass = entries.iter().all(|e| e.pass);
        Self { entries, pass }
    }

    pub fn entry(&self, name: &str) -> Option<&Inequality> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()).collect()
    }
}

pub fn check_core(p: &ParamSet) -> AdmissibilityReport {
    AdmissibilityReport::from_entries(core_entries(p))
}

fn core_entries(p: &ParamSet) -> Vec<Inequality> {
    vec![
        Inequality::new("theta >= eps + nu", p.theta, Relation::GreaterEq, p.eps + p.nu),
        Inequality::new("alpha > theta + eps", p.alpha, Relation::Greater, p.theta + p.eps),
        Inequality::new("beta > nu + eps", p.beta, Relation::Greater, p.nu + p.eps),
    ]
}

/// Open interval `(max{nu + eps, |a - beta| + eps}, (alpha + beta) / 2)`.
pub fn xi_window(p: &ParamSet) -> Result<(f64, f64)> {
    let lo = (p.nu + p.eps).max((p.a - p.beta).abs() + p.eps);
    let hi = (p.alpha + p.beta) / 2.0;
    if lo >= hi {
        return Err(Error::EmptyWindow { lo, hi });
    }
    Ok((lo, hi))
}

/// `alpha beta / (alpha + beta)`, so that the ceiling is this times
/// `q / (D (1 + q)^2)`.
pub fn delta_ceiling_coefficient(p: &ParamSet) -> f64 {
    p.alpha * p.beta / (p.alpha + p.beta)
}

pub fn delta_ceiling(p: &ParamSet) -> f64 {
    p.q * delta_ceiling_coefficient(p) / (p.d * (1.0 + p.q).powi(2))
}

/// The pieces of the lambda ceiling
/// `q^2 num / (D (D bracket_d + K~ bracket_k) (1 + q)^3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaParts {
    /// `(alpha + beta - 2 xi) [(xi - eps)^2 - (a - beta)^2]`.
    pub numerator: f64,
    /// `(xi - eps)^2 - (a - beta)^2`.
    pub bracket_d: f64,
    /// `4 xi (alpha + beta - 2 xi)`.
    pub bracket_k_tilde: f64,
}

pub fn lambda_parts(p: &ParamSet) -> LambdaParts {
    let spread = p.alpha + p.beta - 2.0 * p.xi;
    let gap = (p.xi - p.eps).powi(2) - (p.a - p.beta).powi(2);
    LambdaParts { numerator: spread * gap, bracket_d: gap, bracket_k_tilde: 4.0 * p.xi * spread }
}

pub fn lambda_ceiling(p: &ParamSet) -> Result<f64> {
    let (lo, hi) = xi_window(p)?;
    if !(lo < p.xi && p.xi < hi) {
        return Err(Error::XiOutOfWindow { xi: p.xi, lo, hi });
    }
    let c = lambda_parts(p);
    Ok(p.q * p.q * c.numerator
        / (p.d * (p.d * c.bracket_d + p.k_tilde * c.bracket_k_tilde) * (1.0 + p.q).powi(3)))
}

/// Sup-norm Lipschitz constant of the fixed-point operator.
pub fn sup_contraction_factor(p: &ParamSet) -> f64 {
    p.d * p.delta * (p.alpha + p.beta) / (p.alpha * p.beta)
}

/// Combined bound on `||dF(eta)/db||_{inf,mu}` for any `eta` in the ball.
pub fn derivative_bound(p: &ParamSet) -> f64 {
    let c = lambda_parts(p);
    p.d * p.lambda * (p.d * c.bracket_d + p.k_tilde * c.bracket_k_tilde) / c.numerator * (1.0 + p.q)
}

pub fn full_report(p: &ParamSet) -> AdmissibilityReport {
    let mut entries = core_entries(p);
    entries.push(Inequality::new(
        "gamma > max(theta, nu)",
        p.gamma,
        Relation::Greater,
        p.theta.max(p.nu),
    ));
    let (lo, hi) = match xi_window(p) {
        Ok(w) => w,
        Err(Error::EmptyWindow { lo, hi }) => (lo, hi),
        Err(_) => unreachable!(),
    };
    entries.push(Inequality::inside("xi in window", p.xi, lo, hi));
    entries.push(Inequality::new("delta <= delta_ceiling", p.delta, Relation::LessEq, delta_ceiling(p)));
    let lc = lambda_ceiling(p).unwrap_or(0.0);
    let mut lam = Inequality::new("lambda <= lambda_ceiling", p.lambda, Relation::LessEq, lc);
    lam.pass &= lc > 0.0;
    entries.push(lam);
    AdmissibilityReport::from_entries(entries)
}
