use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use supremal::run::{self, Check, ConfigFile, GridSpec, Outcome};
use supremal::Error;

/// Checks rank-one minimality of Hamilton-Jacobi solutions on grids.
#[derive(Parser)]
#[command(name = "supremal", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid spacing; also rescales a default residual sweep.
    #[arg(long = "grid-h", global = true)]
    grid_h: Option<f64>,
    /// Directory for the JSON report and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimality against random rank-one variations.
    CheckMinimality,
    /// Randomized search for a competitor with smaller energy.
    Falsify,
    /// Sampled rank-one level-convexity of H.
    ConvexityCheck,
    /// ∞-Laplacian or Hamilton-Jacobi residual, with a refinement sweep.
    Residual,
    /// Shell-wise mollification and its error bounds.
    MollifyDemo,
    /// Jensen inequality for level-convex H.
    Jensen,
    /// List gallery entries, or sample one to CSV.
    Gallery {
        #[arg(long)]
        name: Option<String>,
    },
}

const EXIT_FAIL: u8 = 1;
const EXIT_WARN: u8 = 2;
const EXIT_CONFIG: u8 = 64;

fn event(value: serde_json::Value) {
    eprintln!("{value}");
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Syntax { .. }
            | Error::UnknownIdentifier { .. }
            | Error::Arity { .. }
            | Error::UnknownName(_)
            | Error::Parameter(_)
            | Error::Resolution(_)
            | Error::DimensionMismatch(_)
            | Error::InvalidInput(_)
            | Error::Containment(_)
            | Error::BoundaryCondition(_)
            | Error::Json(_)
    )
}

fn error_event(e: &Error) -> serde_json::Value {
    let mut v = json!({"event": "error", "kind": if is_config_error(e) { "config" } else { "run" }, "message": e.to_string()});
    match e {
        Error::Syntax { line, column, .. }
        | Error::UnknownIdentifier { line, column, .. }
        | Error::Arity { line, column, .. } => {
            v["line"] = json!(line);
            v["column"] = json!(column);
        }
        _ => {}
    }
    v
}

fn load(cli: &Cli, check: Check) -> supremal::Result<run::RunConfig> {
    let mut file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.check = Some(check);
    if cli.seed.is_some() {
        file.seed = cli.seed;
    }
    if cli.tol.is_some() {
        file.tol = cli.tol;
    }
    if cli.out.is_some() {
        file.out = cli.out.clone();
    }
    let explicit_sweep = file.residual.as_ref().is_some_and(|r| r.h.is_some());
    let mut cfg = file.resolve()?;
    if let Some(h) = cli.grid_h {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("--grid-h must be positive, got {h}")));
        }
        cfg.grid.h = h;
        if !explicit_sweep {
            cfg.residual.h = Some(vec![h, h / 2.0, h / 4.0]);
        }
    }
    Ok(cfg)
}

fn gallery(cli: &Cli, name: Option<&str>) -> supremal::Result<()> {
    let Some(name) = name else {
        emit(&run::gallery_listing()?);
        return Ok(());
    };
    let grid = match &cli.config {
        Some(p) => ConfigFile::load(p)?.grid,
        None => None,
    };
    let grid = match (grid, cli.grid_h) {
        (Some(g), Some(h)) => Some(GridSpec { h, ..g }),
        (Some(g), None) => Some(g),
        (None, Some(h)) => {
            let dim = supremal::gallery::get(name)?.dim;
            Some(GridSpec { lower: vec![-1.0; dim], upper: vec![1.0; dim], h })
        }
        (None, None) => None,
    };
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let path = run::emit_gallery_csv(name, grid.as_ref(), &dir)?;
    event(json!({"event": "written", "path": path.display().to_string()}));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            event(json!({"event": "error", "kind": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let check = match &cli.command {
        Command::CheckMinimality => Check::Minimality,
        Command::Falsify => Check::Falsify,
        Command::ConvexityCheck => Check::Convexity,
        Command::Residual => Check::Residual,
        Command::MollifyDemo => Check::MollifyDemo,
        Command::Jensen => Check::Jensen,
        Command::Gallery { name } => {
            return match gallery(&cli, name.as_deref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    event(error_event(&e));
                    ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_FAIL })
                }
            };
        }
    };
    let cfg = match load(&cli, check) {
        Ok(c) => c,
        Err(e) => {
            event(error_event(&e));
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    event(json!({"event": "start", "check": check.name(), "seed": cfg.seed}));
    let output = match run::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            event(error_event(&e));
            return ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_FAIL });
        }
    };
    for w in &output.report.warnings {
        event(json!({"event": "warning", "message": w}));
    }
    let mut files = Vec::new();
    if let Some(dir) = &cfg.out {
        match output.write(dir) {
            Ok(paths) => files = paths.iter().map(|p| p.display().to_string()).collect(),
            Err(e) => {
                event(error_event(&e));
                return ExitCode::from(EXIT_FAIL);
            }
        }
    }
    match output.report.to_json() {
        Ok(text) => emit(&text),
        Err(e) => {
            event(error_event(&e));
            return ExitCode::from(EXIT_FAIL);
        }
    }
    let outcome = output.report.outcome;
    event(json!({"event": "done", "check": check.name(), "outcome": outcome, "files": files}));
    ExitCode::from(match outcome {
        Outcome::Pass => 0,
        Outcome::Warn => EXIT_WARN,
        Outcome::Fail => EXIT_FAIL,
    })
}
