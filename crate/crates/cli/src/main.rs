use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mu_lab::admissibility::{full_report, AdmissibilityReport, ParamSet};
use mu_lab::dichotomy::verify_bounds;
use mu_lab::report::{
    build_conjugacy, ceilings, emit_plot_data, residual_csv, run_pipeline, verify_conjugacy, Ceilings,
    ConjugacyArtifact, PlotKind, RunReport, Stage,
};
use mu_lab::scenario::{builtin, parse_scenario, resolve, Scenario, ScenarioFile};
use serde::Serialize;

const EXIT_CONFIG: u8 = 1;

#[derive(Parser)]
#[command(name = "mu-lab", version, about = "Dichotomy certificates and smooth conjugacies for delay equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the scalar hypotheses and print the ceilings.
    CheckParams(Common),
    /// Measure the dichotomy bounds on random time pairs.
    VerifyDichotomy(Common),
    /// Solve for the conjugacy and write the solved field.
    BuildConjugacy(Common),
    /// Re-check conjugacy residuals of a solved field on fresh samples.
    VerifyConjugacy {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run every stage and write the run report.
    Run(Common),
    /// Extract a CSV series from a run report.
    EmitPlot {
        #[arg(long)]
        report: PathBuf,
        /// envelope, residual or contraction
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file, or `builtin:<name>` for a shipped scenario.
    #[arg(long)]
    config: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the certificate and residual sample counts.
    #[arg(long)]
    samples: Option<usize>,
    /// Overrides the certificate tolerance (verify-dichotomy) or the
    /// solver tolerance (build-conjugacy, run).
    #[arg(long)]
    tol: Option<f64>,
}

enum Failure {
    Config(String),
    Stage(Stage),
}

impl From<mu_lab::Error> for Failure {
    fn from(e: mu_lab::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_file(config: &str) -> Result<ScenarioFile, Failure> {
    let text = match config.strip_prefix("builtin:") {
        Some(name) => builtin(name)
            .ok_or_else(|| Failure::Config(format!("no shipped scenario named `{name}`")))?
            .to_string(),
        None => read(Path::new(config))?,
    };
    parse_scenario(&text).map_err(|e| Failure::Config(format!("{config}: {e}")))
}

fn load(c: &Common, tol_is_solver: bool) -> Result<Scenario, Failure> {
    let mut file = load_file(&c.config)?;
    if let Some(seed) = c.seed {
        file.seed = seed;
    }
    if let Some(n) = c.samples {
        file.certificate.samples = n;
        file.conjugacy.residual.samples = n;
    }
    if let Some(tol) = c.tol {
        if tol_is_solver {
            file.conjugacy.solver.tol = tol;
        } else {
            file.certificate.tolerance = tol;
        }
    }
    resolve(file).map_err(|e| Failure::Config(format!("{}: {e}", c.config)))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(&text, out)
}

fn write_text(text: &str, out: Option<&Path>) -> Outcome {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gate(pass: bool, stage: Stage) -> Outcome {
    if pass {
        Ok(())
    } else {
        Err(Failure::Stage(stage))
    }
}

#[derive(Serialize)]
struct ParamsOutput<'a> {
    scenario: &'a str,
    params: ParamSet,
    ceilings: Ceilings,
    report: AdmissibilityReport,
}

fn execute(cmd: Command) -> Outcome {
    match cmd {
        Command::CheckParams(c) => {
            let sc = load(&c, true)?;
            let report = full_report(&sc.params);
            let pass = report.pass;
            let out =
                ParamsOutput { scenario: &sc.file.name, params: sc.params, ceilings: ceilings(&sc.params), report };
            emit(&out, c.out.as_deref())?;
            gate(pass, Stage::Admissibility)
        }
        Command::VerifyDichotomy(c) => {
            let sc = load(&c, false)?;
            let cert = verify_bounds(&sc.model, &sc.certificate, sc.n_ratio, sc.params.d);
            emit(&cert, c.out.as_deref())?;
            gate(cert.pass, Stage::Certificate)
        }
        Command::BuildConjugacy(c) => {
            let sc = load(&c, true)?;
            let mut result = match build_conjugacy(&sc) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("solver: {e}");
                    return Err(Failure::Stage(Stage::Solver));
                }
            };
            let ver = verify_conjugacy(&sc, &result, sc.residual.samples, sc.file.seed)
                .map_err(|e| {
                    eprintln!("residuals: {e}");
                    Failure::Stage(Stage::Verification)
                })?;
            result.residual_grid = ver.residuals;
            let artifact = ConjugacyArtifact::new(&sc, result);
            let s = &artifact.summary;
            eprintln!(
                "sweeps {} | one-mu norm {:.3e} | ratio {:.3e} | derivative margin {:.6} | worst residual_mu {:.3e}",
                s.sweeps.len(),
                s.norms.one_mu,
                s.contraction_rate_measured,
                s.derivative_margin,
                ver.worst_mu
            );
            let pass = s.pass && ver.pass;
            match c.out.as_deref() {
                Some(path) => {
                    emit(&artifact, Some(path))?;
                    let csv = path.with_extension("residuals.csv");
                    write_text(&residual_csv(&artifact.result.residual_grid), Some(&csv))?;
                }
                None => emit(&artifact.summary, None)?,
            }
            gate(pass, Stage::Solver)
        }
        Command::VerifyConjugacy { result, out, seed, samples } => {
            let artifact = ConjugacyArtifact::from_json(&read(&result)?)?;
            let sc = artifact.scenario()?;
            let seed = seed.unwrap_or(sc.file.seed.wrapping_add(1));
            let samples = samples.unwrap_or(sc.residual.samples);
            let ver = verify_conjugacy(&sc, &artifact.result, samples, seed).map_err(|e| {
                eprintln!("residuals: {e}");
                Failure::Stage(Stage::Verification)
            })?;
            emit(&ver, out.as_deref())?;
            gate(ver.pass, Stage::Verification)
        }
        Command::Run(c) => {
            let sc = load(&c, true)?;
            let rep = run_pipeline(&sc);
            emit(&rep, c.out.as_deref())?;
            match rep.failed_stage {
                None => Ok(()),
                Some(stage) => Err(Failure::Stage(stage)),
            }
        }
        Command::EmitPlot { report, kind, out } => {
            let kind: PlotKind = kind.parse()?;
            let rep: RunReport = serde_json::from_str(&read(&report)?)
                .map_err(|e| Failure::Config(format!("{}: {e}", report.display())))?;
            let csv = emit_plot_data(&rep, kind)?;
            write_text(&csv, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MU_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(stage)) => ExitCode::from(stage.exit_code() as u8),
    }
}
