//! Scenario files: JSON descriptions of a model, its perturbation, the
//! parameter set and the numerical settings of every stage.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::admissibility::{delta_ceiling, lambda_ceiling, xi_window, ParamSet};
use crate::conjugacy::{GridSpec, SolverOptions};
use crate::dde::{DelayTerm, LinearDelaySystem};
use crate::dichotomy::{CertificateOptions, Component, ComponentKind, DichotomyConstants, DichotomyModel};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::growth_rate::{linspace, ratio_bound_n, GrowthRate};
use crate::perturbation::{EnvelopeParams, Perturbation, SaturatingSquare, ZeroPerturbation};
use crate::quadrature::TruncationPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// `"exp"`, `"poly"` or `"log"`.
    pub growth_rate: String,
    pub delay: f64,
    #[serde(default = "default_nodes")]
    pub segment_nodes: usize,
    pub system: SystemSpec,
    pub projection: ProjectionSpec,
    pub params: ParamSpec,
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub conjugacy: ConjugacySpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_nodes() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub lag: f64,
    /// Rows of numbers or expressions in `t`.
    pub matrix: Vec<Vec<Entry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Number(f64),
    Expression(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub kind: ComponentKind,
    /// `F_k(t)` with `F_k' = a_kk`; required for unstable components.
    #[serde(default)]
    pub log_flow: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amount {
    Value(f64),
    Fraction(CeilingFraction),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeilingFraction {
    pub ceiling_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub nu: f64,
    pub eps: f64,
    pub a: f64,
    pub gamma: f64,
    /// Defaults to the midpoint of the admissible window.
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default = "one")]
    pub q: f64,
    /// Defaults to the split-model constant.
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default = "one")]
    pub k_tilde: f64,
    pub delta: Amount,
    pub lambda: Amount,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    Zero,
    /// `A(t) psi(m(t) x_input(t - lag)) output`.
    SaturatingSquare { input: usize, lag: f64, output: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSpec {
    pub window: (f64, f64),
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for CertificateSpec {
    fn default() -> Self {
        let d = CertificateOptions::default();
        Self { window: d.window, samples: d.samples, tolerance: d.tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridFileSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    /// Defaults to the extent that keeps every residual orbit on the grid.
    pub c_max: Option<f64>,
    pub c_points: usize,
    pub c_scale: f64,
}

impl Default for GridFileSpec {
    fn default() -> Self {
        Self { t_min: -12.0, t_max: 12.0, t_points: 49, c_max: None, c_points: 201, c_scale: 0.5 }
    }
}

/// Random residual checks: `s <= t <= s + horizon`, `|c_k| <= b_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSpec {
    pub samples: usize,
    /// In units of the delay.
    pub horizon_delays: f64,
    pub b_max: f64,
}

impl Default for ResidualSpec {
    fn default() -> Self {
        Self { samples: 200, horizon_delays: 3.0, b_max: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugacySpec {
    pub grid: GridFileSpec,
    pub truncation: TruncationPolicy,
    pub solver: SolverOptions,
    pub residual: ResidualSpec,
}

/// A fully resolved scenario.
pub struct Scenario {
    pub file: ScenarioFile,
    pub model: DichotomyModel,
    pub pert: Box<dyn Perturbation>,
    pub params: ParamSet,
    pub n_ratio: f64,
    pub certificate: CertificateOptions,
    pub grid: GridSpec,
    pub trunc: TruncationPolicy,
    pub solver: SolverOptions,
    pub residual: ResidualSpec,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario").field("name", &self.file.name).field("params", &self.params).finish()
    }
}

/// Parses JSON, reporting the offending field path and position.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))
}

pub fn load_scenario(text: &str) -> Result<Scenario> {
    resolve(parse_scenario(text)?)
}

const N_GRID: (f64, f64, usize) = (-50.0, 50.0, 2001);
// Central differences straddle the kinks of mu' at t = 0.
const LOG_FLOW_TOL: f64 = 1e-4;

fn parse_expr(src: &str, at: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::Config(format!("at `{at}`: {e}")))
}

fn build_system(spec: &SystemSpec, r: f64, g: &GrowthRate) -> Result<LinearDelaySystem> {
    let n = spec.terms.first().map(|t| t.matrix.len()).ok_or_else(|| {
        Error::Config("at `system.terms`: at least one term is required".into())
    })?;
    let mut terms = Vec::new();
    for (ti, term) in spec.terms.iter().enumerate() {
        let at = format!("system.terms[{ti}].matrix");
        if term.matrix.len() != n || term.matrix.iter().any(|row| row.len() != n) {
            return Err(Error::Config(format!("at `{at}`: expected a {n} x {n} matrix")));
        }
        let mut fixed = vec![0.0; n * n];
        let mut varying: Vec<(usize, Arc<dyn Fn(f64) -> f64 + Send + Sync>)> = Vec::new();
        for (i, row) in term.matrix.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                match e {
                    Entry::Number(v) => fixed[i * n + j] = *v,
                    Entry::Expression(src) => {
                        let ex = parse_expr(src, &format!("{at}[{i}][{j}]"))?;
                        match ex.as_constant() {
                            Some(v) => fixed[i * n + j] = v,
                            None => varying.push((i * n + j, ex.bind(g))),
                        }
                    }
                }
            }
        }
        terms.push(if varying.is_empty() {
            DelayTerm::constant(term.lag, fixed)
        } else {
            DelayTerm::new(term.lag, move |t, out| {
                out.copy_from_slice(&fixed);
                for (idx, f) in &varying {
                    out[*idx] = f(t);
                }
            })
        });
    }
    LinearDelaySystem::new(r, n, terms, "scenario")
}

fn amount(a: Amount, ceiling: impl FnOnce() -> Result<f64>, at: &str) -> Result<f64> {
    match a {
        Amount::Value(v) => Ok(v),
        Amount::Fraction(CeilingFraction { ceiling_fraction: f }) => {
            if !(f > 0.0) {
                return Err(Error::Config(format!("at `{at}`: ceiling_fraction must be positive")));
            }
            // An unavailable ceiling leaves the amount at zero; admissibility
            // then reports why.
            Ok(ceiling().map(|c| f * c).unwrap_or(0.0))
        }
    }
}

pub fn resolve(file: ScenarioFile) -> Result<Scenario> {
    let g = GrowthRate::from_id(&file.growth_rate).ok_or_else(|| {
        Error::Config(format!("at `growth_rate`: unknown id `{}` (exp, poly, log)", file.growth_rate))
    })?;
    let r = file.delay;
    if !(r > 0.0) {
        return Err(Error::Config("at `delay`: must be positive".into()));
    }
    let sys = build_system(&file.system, r, &g)?;
    let n = sys.n;
    if file.projection.components.len() != n {
        return Err(Error::Config(format!(
            "at `projection.components`: expected {n} components, got {}",
            file.projection.components.len()
        )));
    }
    let mut components = Vec::new();
    for (k, c) in file.projection.components.iter().enumerate() {
        components.push(match &c.log_flow {
            Some(src) => {
                let f = parse_expr(src, &format!("projection.components[{k}].log_flow"))?.bind(&g);
                match c.kind {
                    ComponentKind::Stable => Component::stable(move |t| f(t)),
                    ComponentKind::Unstable => Component::unstable(move |t| f(t)),
                }
            }
            None => match c.kind {
                ComponentKind::Stable => Component::stable_numeric(),
                ComponentKind::Unstable => {
                    return Err(Error::Config(format!(
                        "at `projection.components[{k}]`: unstable components need a log_flow"
                    )))
                }
            },
        });
    }
    let p = &file.params;
    let grid = linspace(N_GRID.0, N_GRID.1, N_GRID.2);
    let n_ratio = ratio_bound_n(&g, r, &grid)?;
    let has_unstable = components.iter().any(|c| c.kind == ComponentKind::Unstable);
    let constants = DichotomyConstants {
        k: p.k.unwrap_or_else(|| DichotomyConstants::split_model_k(n_ratio, p.alpha, has_unstable)),
        alpha: p.alpha,
        beta: p.beta,
        theta: p.theta,
        nu: p.nu,
        k_tilde: p.k_tilde,
        a: p.a,
        eps: p.eps,
    };
    let model = DichotomyModel::new(sys, g.clone(), components, constants, file.segment_nodes)
        .map_err(|e| Error::Config(format!("at `projection`: {e}")))?;
    let mismatch = model.log_flow_mismatch(&linspace(-20.0, 20.0, 161));
    if mismatch > LOG_FLOW_TOL {
        return Err(Error::Config(format!(
            "at `projection.components`: log_flow derivative differs from the diagonal coefficient by {mismatch:.3e}"
        )));
    }
    let d = model.derived_constant_d(n_ratio);
    let mut params = ParamSet {
        alpha: p.alpha,
        beta: p.beta,
        theta: p.theta,
        nu: p.nu,
        eps: p.eps,
        a: p.a,
        gamma: p.gamma,
        xi: 0.0,
        delta: 0.0,
        lambda: 0.0,
        q: p.q,
        k: constants.k,
        k_tilde: p.k_tilde,
        n: n_ratio,
        d,
    };
    params.xi = p.xi.unwrap_or_else(|| match xi_window(&params) {
        Ok((lo, hi)) => 0.5 * (lo + hi),
        Err(Error::EmptyWindow { lo, hi }) => 0.5 * (lo + hi),
        Err(_) => f64::NAN,
    });
    params.delta = amount(p.delta, || Ok(delta_ceiling(&params)), "params.delta")?;
    params.lambda = amount(p.lambda, || lambda_ceiling(&params), "params.lambda")?;
    for (name, v) in [("delta", params.delta), ("lambda", params.lambda)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("at `params.{name}`: must be a nonnegative number")));
        }
    }

    let env = EnvelopeParams {
        delta: params.delta,
        gamma: params.gamma,
        lambda: params.lambda,
        xi: params.xi,
        eps: params.eps,
    };
    let pert: Box<dyn Perturbation> = match &file.perturbation {
        PerturbationSpec::Zero => Box::new(ZeroPerturbation::new(n)),
        PerturbationSpec::SaturatingSquare { input, lag, output } => Box::new(
            SaturatingSquare::new(n, *input, *lag, output.clone(), g.clone(), env)
                .map_err(|e| Error::Config(format!("at `perturbation`: {e}")))?,
        ),
    };

    let cs = file.certificate;
    let certificate = CertificateOptions {
        window: cs.window,
        samples: cs.samples,
        seed: file.seed,
        tolerance: cs.tolerance,
    };
    let cj = file.conjugacy;
    let gs = cj.grid;
    let horizon = cj.residual.horizon_delays * r;
    let c_max = gs.c_max.unwrap_or_else(|| {
        GridSpec::orbit_extent(&model, gs.t_min, gs.t_max, cj.residual.b_max, horizon).max(1.0)
    });
    let grid = GridSpec {
        t_min: gs.t_min,
        t_max: gs.t_max,
        t_points: gs.t_points,
        c_max,
        c_points: gs.c_points,
        c_scale: gs.c_scale,
    };
    Ok(Scenario {
        file,
        model,
        pert,
        params,
        n_ratio,
        certificate,
        grid,
        trunc: cj.truncation,
        solver: cj.solver,
        residual: cj.residual,
    })
}

/// Scenarios shipped with the crate, by name.
pub const BUILTIN: [(&str, &str); 11] = [
    ("saddle_2d", include_str!("../scenarios/saddle_2d.json")),
    ("saddle_2d_unperturbed", include_str!("../scenarios/saddle_2d_unperturbed.json")),
    ("saddle_2d_theta_low", include_str!("../scenarios/saddle_2d_theta_low.json")),
    ("saddle_2d_delta_over", include_str!("../scenarios/saddle_2d_delta_over.json")),
    ("scalar_stable_exp", include_str!("../scenarios/scalar_stable_exp.json")),
    ("scalar_stable_poly", include_str!("../scenarios/scalar_stable_poly.json")),
    ("scalar_stable_log", include_str!("../scenarios/scalar_stable_log.json")),
    ("scalar_unstable_exp", include_str!("../scenarios/scalar_unstable_exp.json")),
    ("scalar_unstable_poly", include_str!("../scenarios/scalar_unstable_poly.json")),
    ("scalar_unstable_log", include_str!("../scenarios/scalar_unstable_log.json")),
    ("nonuniform_exp", include_str!("../scenarios/nonuniform_exp.json")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_resolves() {
        for (name, text) in BUILTIN {
            let sc = load_scenario(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(sc.file.name, name);
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let mut v: serde_json::Value = serde_json::from_str(builtin("saddle_2d").unwrap()).unwrap();
        v["params"]["alpah"] = 0.8.into();
        let err = load_scenario(&v.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("params") && msg.contains("alpah"), "{msg}");
    }

    #[test]
    fn xi_defaults_to_window_midpoint() {
        let sc = load_scenario(builtin("saddle_2d").unwrap()).unwrap();
        assert!((sc.params.xi - 0.6).abs() < 1e-15);
        let d = 2.0 * 3f64.exp();
        assert!((sc.params.d - d).abs() < 1e-9 * d);
    }

    #[test]
    fn inconsistent_log_flow_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(builtin("scalar_unstable_exp").unwrap()).unwrap();
        v["projection"]["components"][0]["log_flow"] = "0.5*t".into();
        let err = load_scenario(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("log_flow"), "{err}");
    }

    #[test]
    fn bad_expression_reports_the_entry() {
        let mut v: serde_json::Value = serde_json::from_str(builtin("nonuniform_exp").unwrap()).unwrap();
        v["system"]["terms"][0]["matrix"][0][0] = "-1 - sin(".into();
        let err = load_scenario(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("system.terms[0].matrix[0][0]"), "{err}");
    }
}
