//! The end-to-end pipeline and its JSON report, plus CSV series for
//! plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admissibility::{
    delta_ceiling, delta_ceiling_coefficient, full_report, lambda_ceiling, lambda_parts,
    sup_contraction_factor, AdmissibilityReport, LambdaParts, ParamSet,
};
use crate::conjugacy::{
    invertibility_check, residual_table, sample_triples, Conjugacy, ConjugacyResult, EtaNorms,
    InvertibilityReport, Residual, SweepRecord,
};
use crate::dichotomy::{verify_bounds, DichotomyCertificate};
use crate::error::{Error, Result};
use crate::scenario::{resolve, Scenario, ScenarioFile};

pub const REPORT_SCHEMA: &str = "mu-lab/run-report/v1";
pub const ARTIFACT_SCHEMA: &str = "mu-lab/conjugacy/v1";

/// Slack on the contraction and derivative bounds.
pub const RATE_SLACK: f64 = 0.05;
pub const RESIDUAL_TOL: f64 = 5e-3;
pub const RESIDUAL_TOL_UNPERTURBED: f64 = 1e-6;
pub const CONSISTENCY_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Admissibility,
    Certificate,
    Solver,
    Verification,
}

impl Stage {
    /// Process exit code for a failure at this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Admissibility => 2,
            Stage::Certificate => 3,
            Stage::Solver | Stage::Verification => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    pub delta_ceiling: f64,
    pub delta_ceiling_coefficient: f64,
    pub lambda_ceiling: Option<f64>,
    pub lambda_parts: LambdaParts,
    pub sup_contraction_factor: f64,
}

pub fn ceilings(p: &ParamSet) -> Ceilings {
    Ceilings {
        delta_ceiling: delta_ceiling(p),
        delta_ceiling_coefficient: delta_ceiling_coefficient(p),
        lambda_ceiling: lambda_ceiling(p).ok(),
        lambda_parts: lambda_parts(p),
        sup_contraction_factor: sup_contraction_factor(p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

fn at_most(name: &str, value: f64, limit: f64) -> Check {
    Check { name: name.into(), value, limit, pass: value <= limit }
}

/// Everything about the solved conjugacy except the field itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacySummary {
    pub grid_points: usize,
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
    pub invertibility: InvertibilityReport,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn summarize(sc: &Scenario, res: &ConjugacyResult) -> ConjugacySummary {
    let p = &sc.params;
    let rate_limit = p.q / (1.0 + p.q) + RATE_SLACK;
    let inv = invertibility_check(res, &sc.model);
    let mut checks = vec![
        at_most("contraction ratio", res.contraction_rate_measured, rate_limit),
        at_most(
            "sup norm",
            res.norms.sup,
            p.d * p.delta * (p.alpha + p.beta) / (p.alpha * p.beta) + sc.trunc.tail_tol,
        ),
        at_most("one-mu norm", res.norms.one_mu, p.q),
        at_most("derivative norm", res.norms.deriv_sup_mu, rate_limit),
    ];
    if sc.model.d_u() > 0 {
        checks.push(at_most("derivative consistency", res.derivative_consistency, CONSISTENCY_TOL));
    }
    let pass = res.converged && inv.pass && checks.iter().all(|c| c.pass);
    ConjugacySummary {
        grid_points: res.eta.points(),
        norms: res.norms,
        sweeps: res.sweeps.clone(),
        converged: res.converged,
        tol: res.tol,
        contraction_rate_measured: res.contraction_rate_measured,
        contraction_rate_theoretical: res.contraction_rate_theoretical,
        sup_contraction_theoretical: res.sup_contraction_theoretical,
        derivative_margin: res.derivative_margin,
        derivative_consistency: res.derivative_consistency,
        clamp_rate: res.clamp_rate,
        invertibility: inv,
        checks,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub samples: usize,
    pub seed: u64,
    pub horizon: f64,
    pub b_max: f64,
    pub worst_mu: f64,
    pub worst_raw: f64,
    pub tolerance: f64,
    pub residuals: Vec<Residual>,
    pub pass: bool,
}

/// Residuals of the conjugacy identity on fresh random triples.
pub fn verify_conjugacy(sc: &Scenario, res: &ConjugacyResult, samples: usize, seed: u64) -> Result<Verification> {
    let horizon = sc.residual.horizon_delays * sc.model.r();
    let b_max = sc.residual.b_max;
    let triples = sample_triples(&res.eta, sc.model.r(), horizon, b_max, samples, seed);
    let residuals = residual_table(&res.eta, &sc.model, sc.pert.as_ref(), &sc.params, &triples)?;
    let worst_mu = residuals.iter().map(|r| r.mu).fold(0.0, f64::max);
    let worst_raw = residuals.iter().map(|r| r.raw).fold(0.0, f64::max);
    let tolerance = if sc.pert.is_zero() { RESIDUAL_TOL_UNPERTURBED } else { RESIDUAL_TOL };
    Ok(Verification {
        samples,
        seed,
        horizon,
        b_max,
        worst_mu,
        worst_raw,
        tolerance,
        pass: worst_mu <= tolerance && residuals.iter().all(|r| r.mu.is_finite()),
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub params: ParamSet,
    pub ceilings: Ceilings,
    pub admissibility: AdmissibilityReport,
    pub certificate: Option<DichotomyCertificate>,
    pub conjugacy: Option<ConjugacySummary>,
    pub verification: Option<Verification>,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub pass: bool,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.failed_stage.map_or(0, Stage::exit_code)
    }

    /// The report with timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> RunReport {
        RunReport { timings: BTreeMap::new(), ..self.clone() }
    }
}

/// Builds the conjugacy for a resolved scenario.
pub fn build_conjugacy(sc: &Scenario) -> Result<ConjugacyResult> {
    let conj = Conjugacy::new(&sc.model, sc.pert.as_ref(), sc.params, sc.trunc)?;
    conj.picard_solve(&sc.grid, &sc.solver)
}

/// Admissibility, dichotomy certificate, conjugacy and residual checks in
/// sequence; stops at the first failing stage.
pub fn run_pipeline(sc: &Scenario) -> RunReport {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let p = sc.params;
    let mut rep = RunReport {
        schema: REPORT_SCHEMA.into(),
        scenario: sc.file.name.clone(),
        seed: sc.file.seed,
        params: p,
        ceilings: ceilings(&p),
        admissibility: full_report(&p),
        certificate: None,
        conjugacy: None,
        verification: None,
        failed_stage: None,
        error: None,
        pass: false,
        timings: BTreeMap::new(),
    };
    lap("admissibility", &mut timings);
    let finish = |mut rep: RunReport, stage: Option<Stage>, timings| {
        rep.failed_stage = stage;
        rep.pass = stage.is_none();
        rep.timings = timings;
        rep
    };
    if !rep.admissibility.pass {
        return finish(rep, Some(Stage::Admissibility), timings);
    }

    let cert = verify_bounds(&sc.model, &sc.certificate, sc.n_ratio, p.d);
    let cert_pass = cert.pass;
    rep.certificate = Some(cert);
    lap("certificate", &mut timings);
    if !cert_pass {
        return finish(rep, Some(Stage::Certificate), timings);
    }

    let res = match build_conjugacy(sc) {
        Ok(r) => r,
        Err(e) => {
            rep.error = Some(e.to_string());
            lap("conjugacy", &mut timings);
            return finish(rep, Some(Stage::Solver), timings);
        }
    };
    let summary = summarize(sc, &res);
    let solved = summary.pass;
    rep.conjugacy = Some(summary);
    lap("conjugacy", &mut timings);
    if !solved {
        return finish(rep, Some(Stage::Solver), timings);
    }

    let ver = verify_conjugacy(sc, &res, sc.residual.samples, sc.file.seed);
    lap("verification", &mut timings);
    match ver {
        Ok(v) => {
            let ok = v.pass;
            rep.verification = Some(v);
            finish(rep, (!ok).then_some(Stage::Verification), timings)
        }
        Err(e) => {
            rep.error = Some(e.to_string());
            finish(rep, Some(Stage::Verification), timings)
        }
    }
}

/// Solved field together with the scenario that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyArtifact {
    pub schema: String,
    pub scenario: ScenarioFile,
    pub summary: ConjugacySummary,
    pub result: ConjugacyResult,
}

impl ConjugacyArtifact {
    pub fn new(sc: &Scenario, result: ConjugacyResult) -> Self {
        Self {
            schema: ARTIFACT_SCHEMA.into(),
            scenario: sc.file.clone(),
            summary: summarize(sc, &result),
            result,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("result file: {e}")))?;
        if a.schema != ARTIFACT_SCHEMA {
            return Err(Error::Config(format!("result file: unsupported schema `{}`", a.schema)));
        }
        Ok(a)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        resolve(self.scenario.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Envelope,
    Residual,
    Contraction,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(PlotKind::Envelope),
            "residual" => Ok(PlotKind::Residual),
            "contraction" => Ok(PlotKind::Contraction),
            _ => Err(Error::Config(format!("unknown plot kind `{s}` (envelope, residual, contraction)"))),
        }
    }
}

pub fn residual_csv(rows: &[Residual]) -> String {
    let mut out = String::from("t,s,c,raw,mu,baseline_raw,baseline_mu\n");
    for r in rows {
        let c: Vec<String> = r.c.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(
            out,
            "{:e},{:e},{},{:e},{:e},{:e},{:e}",
            r.t,
            r.s,
            c.join(";"),
            r.raw,
            r.mu,
            r.baseline_raw,
            r.baseline_mu
        );
    }
    out
}

pub fn emit_plot_data(rep: &RunReport, kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::Envelope => {
            let cert = rep.certificate.as_ref().ok_or_else(|| Error::MissingSeries("envelope".into()))?;
            let mut out = String::from("t,s,measured,bound,ratio\n");
            for e in &cert.envelope_series {
                let _ = writeln!(out, "{:e},{:e},{:e},{:e},{:e}", e.t, e.s, e.measured, e.bound, e.ratio);
            }
            Ok(out)
        }
        PlotKind::Residual => {
            let v = rep.verification.as_ref().ok_or_else(|| Error::MissingSeries("residual".into()))?;
            Ok(residual_csv(&v.residuals))
        }
        PlotKind::Contraction => {
            let c = rep.conjugacy.as_ref().ok_or_else(|| Error::MissingSeries("contraction".into()))?;
            let mut out = String::from("k,delta_one_mu,ratio\n");
            for s in &c.sweeps {
                let ratio = s.ratio.map_or(String::new(), |r| format!("{r:e}"));
                let _ = writeln!(out, "{},{:e},{}", s.k, s.delta_one_mu, ratio);
            }
            Ok(out)
        }
    }
}
