//! Batch runs driven by a JSON configuration.
//!
//! A [`ConfigFile`] may leave any field out; [`ConfigFile::resolve`] fills in
//! check-specific defaults and the resolved [`RunConfig`] is embedded in
//! every report. Same configuration and seed, same report bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calculus::{hj_residual, system_residual, ResidualKind, ResidualReport};
use crate::error::{Error, Result};
use crate::gallery::{self, AnalyticField};
use crate::grid::{fmt17, read_with_header, write_with_header, GridDomain, GridField, SubdomainMask};
use crate::hamiltonian::{self, ConvexityOptions, Hamiltonian, PointSampler, VerdictStatus};
use crate::mollify::{self, PiecewiseAffine};
use crate::seed::stream_rng;
use crate::tensor::Mat;
use crate::verify::{self, FalsifyOptions, MinimalityOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Minimality,
    Falsify,
    Convexity,
    Residual,
    MollifyDemo,
    Jensen,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Minimality => "minimality",
            Check::Falsify => "falsify",
            Check::Convexity => "convexity",
            Check::Residual => "residual",
            Check::MollifyDemo => "mollify-demo",
            Check::Jensen => "jensen",
        }
    }
}

/// `"euclidean"`, `"annulus"`, any expression text, or
/// `{"weighted-eikonal": "<weight>"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HamiltonianSpec {
    Text(String),
    Tagged(TaggedHamiltonian),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaggedHamiltonian {
    WeightedEikonal(String),
    Expression(String),
}

impl HamiltonianSpec {
    pub fn build(&self, components: usize, dim: usize, claim: Option<bool>) -> Result<Hamiltonian> {
        let h = match self {
            HamiltonianSpec::Text(t) if t == "euclidean" => Hamiltonian::euclidean(components, dim)?,
            HamiltonianSpec::Text(t) if t == "annulus" => Hamiltonian::annulus(components, dim)?,
            HamiltonianSpec::Text(t) | HamiltonianSpec::Tagged(TaggedHamiltonian::Expression(t)) => {
                Hamiltonian::parse(t, components, dim)?
            }
            HamiltonianSpec::Tagged(TaggedHamiltonian::WeightedEikonal(w)) => {
                Hamiltonian::weighted_eikonal(components, dim, w)?
            }
        };
        Ok(match claim {
            Some(c) => h.with_claim(Some(c)),
            None => h,
        })
    }
}

/// A gallery name or `{"csv": "<path>"}` (a field file with its `# {json}`
/// header).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Gallery(String),
    Csv { csv: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Every point at least `depth` cells from the grid edge.
    Interior { depth: usize },
    /// The open ball `‖x − center‖ < radius`.
    Ball { center: Vec<f64>, radius: f64 },
    /// The open box `lower < x < upper`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl MaskSpec {
    pub fn build(&self, domain: &GridDomain) -> Result<SubdomainMask> {
        let eps = 1e-9 * domain.h();
        let mask = match self {
            MaskSpec::Interior { depth } => SubdomainMask::interior(domain, *depth),
            MaskSpec::Ball { center, radius } => {
                check_len(center.len(), domain.dim(), "mask centre")?;
                SubdomainMask::from_predicate(domain, 1, "ball", |x| {
                    x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < radius - eps
                })?
            }
            MaskSpec::Box { lower, upper } => {
                check_len(lower.len(), domain.dim(), "mask box")?;
                check_len(upper.len(), domain.dim(), "mask box")?;
                SubdomainMask::from_predicate(domain, 1, "box", |x| {
                    x.iter().zip(lower.iter().zip(upper)).all(|(v, (lo, hi))| *v > lo + eps && *v < hi - eps)
                })?
            }
        };
        if mask.is_empty() {
            return Err(Error::Config("mask selects no grid point".into()));
        }
        Ok(mask)
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{what} has dimension {got}, the grid {want}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    #[default]
    Analytic,
    Fd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualTarget {
    System,
    Tangential,
    Normal,
    /// `|H(x, Du) − c|`.
    Hj,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualFile {
    pub target: Option<ResidualTarget>,
    /// Grid spacings of the sweep.
    pub h: Option<Vec<f64>>,
    pub rank_tol: Option<f64>,
    pub min_order: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexityFile {
    pub segments: Option<usize>,
    pub scale: Option<f64>,
    pub points: Option<PointSampler>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifyFile {
    pub d0: Option<f64>,
    pub eps: Option<Vec<f64>>,
    pub max_shells: Option<usize>,
    pub slope: Option<f64>,
    pub planes: Option<usize>,
}

/// A configuration document as written by a user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub check: Option<Check>,
    pub hamiltonian: Option<HamiltonianSpec>,
    pub claimed_level_convex: Option<bool>,
    pub field: Option<FieldSpec>,
    pub grid: Option<GridSpec>,
    pub mask: Option<MaskSpec>,
    pub seed: Option<u64>,
    pub xi: Option<Vec<f64>>,
    pub level: Option<f64>,
    pub tol: Option<f64>,
    pub tau: Option<f64>,
    pub trials: Option<usize>,
    pub derivatives: Option<DerivativeMode>,
    pub expect_witness: Option<bool>,
    pub residual: Option<ResidualFile>,
    pub convexity: Option<ConvexityFile>,
    pub mollify: Option<MollifyFile>,
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub check: Check,
    pub hamiltonian: HamiltonianSpec,
    pub claimed_level_convex: Option<bool>,
    pub field: FieldSpec,
    pub grid: GridSpec,
    pub mask: MaskSpec,
    pub seed: u64,
    pub xi: Option<Vec<f64>>,
    pub level: Option<f64>,
    pub tol: Option<f64>,
    pub tau: Option<f64>,
    pub trials: usize,
    pub derivatives: DerivativeMode,
    pub expect_witness: bool,
    pub residual: ResidualFile,
    pub convexity: ConvexityFile,
    pub mollify: MollifyFile,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills in defaults for the selected check.
    pub fn resolve(self) -> Result<RunConfig> {
        let check = self.check.ok_or_else(|| Error::Config("no check selected".into()))?;
        let default_field = match check {
            Check::Falsify => "cone",
            Check::Residual => "complex-exp",
            _ => "affine",
        };
        let field = self.field.unwrap_or(FieldSpec::Gallery(default_field.into()));
        let dim = match &field {
            FieldSpec::Gallery(name) => gallery::get(name)?.dim,
            FieldSpec::Csv { .. } => self.grid.as_ref().map_or(2, |g| g.lower.len()),
        };
        let (lo, hi, h) = match check {
            Check::Falsify => (-1.2, 1.2, 0.02),
            Check::Residual => (-1.0, 1.0, 0.1),
            Check::MollifyDemo => (-0.2, 1.2, 0.005),
            _ => (0.0, 1.0, 0.02),
        };
        let grid = self.grid.unwrap_or(GridSpec { lower: vec![lo; dim], upper: vec![hi; dim], h });
        let mask = self.mask.unwrap_or(match check {
            Check::Falsify => MaskSpec::Ball { center: vec![0.0; dim], radius: 1.0 },
            Check::MollifyDemo => MaskSpec::Box { lower: vec![0.0; dim], upper: vec![1.0; dim] },
            _ => MaskSpec::Interior { depth: 1 },
        });
        let trials = self.trials.unwrap_or(match check {
            Check::Jensen => 1000,
            _ => 200,
        });
        let derivatives = self.derivatives.unwrap_or(match check {
            Check::Residual => DerivativeMode::Fd,
            _ => DerivativeMode::Analytic,
        });
        let mut residual = self.residual.unwrap_or_default();
        residual.target.get_or_insert(ResidualTarget::System);
        residual.h.get_or_insert_with(|| vec![grid.h, grid.h / 2.0, grid.h / 4.0]);
        residual.min_order.get_or_insert(1.8);
        let mut convexity = self.convexity.unwrap_or_default();
        convexity.segments.get_or_insert(10_000);
        convexity.scale.get_or_insert(1.0);
        let mut mollify = self.mollify.unwrap_or_default();
        mollify.slope.get_or_insert(2.0);
        mollify.planes.get_or_insert(3);
        if grid.h <= 0.0 || grid.lower.len() != grid.upper.len() {
            return Err(Error::Config("grid needs matching corners and h > 0".into()));
        }
        Ok(RunConfig {
            check,
            hamiltonian: self.hamiltonian.unwrap_or(HamiltonianSpec::Text("euclidean".into())),
            claimed_level_convex: self.claimed_level_convex,
            field,
            grid,
            mask,
            seed: self.seed.unwrap_or(0),
            xi: self.xi,
            level: self.level,
            tol: self.tol,
            tau: self.tau,
            trials,
            derivatives,
            expect_witness: self.expect_witness.unwrap_or(true),
            residual,
            convexity,
            mollify,
            out: self.out,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Pass,
    Warn,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub check: Check,
    pub outcome: Outcome,
    pub warnings: Vec<String>,
    pub config: RunConfig,
    pub result: serde_json::Value,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A CSV table: header, rows, and optional trailing comment lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<String>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), footer: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let mut text = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for line in &self.footer {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
        Ok(text)
    }
}

fn num(v: f64) -> String {
    fmt17(v)
}

pub struct RunOutput {
    pub report: RunReport,
    pub tables: Vec<Table>,
}

impl RunOutput {
    /// Writes `<check>.json` and every table into `dir`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = vec![dir.join(format!("{}.json", self.report.check.name()))];
        fs::write(&paths[0], self.report.to_json()? + "\n")?;
        for t in &self.tables {
            let p = dir.join(&t.name);
            fs::write(&p, t.to_csv()?)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

struct Setup {
    domain: GridDomain,
    mask: SubdomainMask,
    u: GridField,
    analytic: Option<AnalyticField>,
}

fn build_domain(g: &GridSpec) -> Result<GridDomain> {
    GridDomain::new(g.lower.clone(), g.upper.clone(), g.h)
}

fn setup(cfg: &RunConfig, grid: &GridSpec) -> Result<Setup> {
    let (domain, u, analytic) = match &cfg.field {
        FieldSpec::Gallery(name) => {
            let f = gallery::get(name)?;
            let domain = build_domain(grid)?;
            let u = f.sample(&domain)?;
            (domain, u, Some(f))
        }
        FieldSpec::Csv { csv } => {
            let file = fs::File::open(csv).map_err(|e| Error::Config(format!("cannot open {}: {e}", csv.display())))?;
            let u = read_with_header(file)?;
            (u.domain().clone(), u, None)
        }
    };
    let u = u.use_analytic(cfg.derivatives == DerivativeMode::Analytic && analytic.is_some());
    let mask = cfg.mask.build(&domain)?;
    Ok(Setup { domain, mask, u, analytic })
}

fn hamiltonian_for(cfg: &RunConfig, components: usize, dim: usize) -> Result<Hamiltonian> {
    cfg.hamiltonian.build(components, dim, cfg.claimed_level_convex)
}

/// Level `c`: configured, else the gallery entry's eikonal level for the
/// Euclidean norm, else `H` at the first masked point.
fn level_for(cfg: &RunConfig, s: &Setup, h: &Hamiltonian) -> Result<f64> {
    if let Some(c) = cfg.level {
        return Ok(c);
    }
    if let (Some(f), HamiltonianSpec::Text(t)) = (&s.analytic, &cfg.hamiltonian) {
        if t == "euclidean" {
            if let Some(c) = f.facts.eikonal_level {
                return Ok(c);
            }
        }
    }
    let i = s.mask.indices()[0];
    h.eval(&s.domain.point(i), &s.u.gradient(i)?)
}

/// Executes the configured check.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.check {
        Check::Minimality => run_minimality(cfg),
        Check::Falsify => run_falsify(cfg),
        Check::Convexity => run_convexity(cfg),
        Check::Residual => run_residual(cfg),
        Check::MollifyDemo => run_mollify(cfg),
        Check::Jensen => run_jensen(cfg),
    }
}

fn finish(cfg: &RunConfig, outcome: Outcome, warnings: Vec<String>, result: impl Serialize, tables: Vec<Table>) -> Result<RunOutput> {
    Ok(RunOutput {
        report: RunReport { check: cfg.check, outcome, warnings, config: cfg.clone(), result: serde_json::to_value(result)? },
        tables,
    })
}

#[derive(Serialize)]
struct MinimalityResult {
    level: f64,
    tol: f64,
    trials: usize,
    passed: usize,
    worst_margin: f64,
    worst_margin_in_h: f64,
    fraction_within_2h: f64,
    hypothesis: verify::HypothesisGate,
    reports: Vec<verify::VerifyReport>,
    variations: Vec<verify::Variation>,
}

fn run_minimality(cfg: &RunConfig) -> Result<RunOutput> {
    let s = setup(cfg, &cfg.grid)?;
    let h = hamiltonian_for(cfg, s.u.components(), s.domain.dim())?;
    let c = level_for(cfg, &s, &h)?;
    let tol = match cfg.tol {
        Some(t) => t,
        None => verify::default_tol(&s.u, &s.mask)?,
    };
    let max_radius = s.mask.inradius(&s.domain) / 2.0;
    let opts = MinimalityOptions { tol: Some(tol), tau: cfg.tau, radius: Default::default(), seed: Some(cfg.seed) };
    let mut reports = Vec::new();
    let mut variations = Vec::new();
    let mut margins = Table::new("margins.csv", &["trial", "margin", "tol"]);
    for t in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, t as u64);
        let mut var = verify::sample_variation(&s.domain, &s.mask, s.u.components(), 3, max_radius, &mut rng)?;
        if let Some(xi) = &cfg.xi {
            var.xi = xi.clone();
        }
        let phi = var.phi(&s.domain)?;
        let r = verify::minimality_check(&h, &s.u, &s.mask, c, &var.xi, &phi, &opts)?;
        margins.rows.push(vec![t.to_string(), num(r.margin), num(r.tol)]);
        reports.push(r);
        variations.push(var);
    }
    let hypothesis = verify::hypothesis_gate(&h, &s.u, &s.mask, c, cfg.tau)?;
    let passed = reports.iter().filter(|r| r.pass).count();
    let worst = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let within = reports.iter().filter(|r| r.margin >= -2.0 * s.domain.h()).count();
    let mut warnings = Vec::new();
    let outcome = if !hypothesis.met {
        warnings.push("hypothesis gate failed: the field is not a C¹ solution on the grid".into());
        Outcome::Fail
    } else if passed < reports.len() {
        Outcome::Fail
    } else if hypothesis.near_miss {
        warnings.push(format!(
            "HJ residual {:.3e} is within a factor two of τ = {:.3e}",
            hypothesis.hj_residual, hypothesis.tau
        ));
        Outcome::Warn
    } else {
        Outcome::Pass
    };
    let result = MinimalityResult {
        level: c,
        tol,
        trials: reports.len(),
        passed,
        worst_margin: worst,
        worst_margin_in_h: worst / s.domain.h(),
        fraction_within_2h: within as f64 / reports.len().max(1) as f64,
        hypothesis,
        reports,
        variations,
    };
    finish(cfg, outcome, warnings, result, vec![margins])
}

#[derive(Serialize)]
struct FalsifyResult {
    expect_witness: bool,
    found: bool,
    hypothesis: verify::HypothesisGate,
    outcome: verify::FalsifyOutcome,
    recomputed: Option<(f64, f64)>,
}

fn run_falsify(cfg: &RunConfig) -> Result<RunOutput> {
    let s = setup(cfg, &cfg.grid)?;
    let h = hamiltonian_for(cfg, s.u.components(), s.domain.dim())?;
    let c = level_for(cfg, &s, &h)?;
    let hypothesis = verify::hypothesis_gate(&h, &s.u, &s.mask, c, cfg.tau)?;
    let opts = FalsifyOptions { budget: cfg.trials.max(1), seed: cfg.seed, tol: cfg.tol, ..Default::default() };
    let outcome = verify::falsify(&h, &s.u, &s.mask, &opts)?;
    let recomputed = match &outcome.witness {
        Some(w) => Some(verify::recompute_witness(&h, &s.u, &s.mask, w)?),
        None => None,
    };
    let found = outcome.witness.is_some();
    let mut warnings = Vec::new();
    if found && hypothesis.met {
        warnings.push("witness found although the hypothesis gate is met".into());
    }
    let verdict = if found == cfg.expect_witness { Outcome::Pass } else { Outcome::Fail };
    let mut table = Table::new("witness.csv", &["e_u", "e_competitor", "gap", "tol"]);
    if let Some(w) = &outcome.witness {
        table.rows.push(vec![num(w.e_u), num(w.e_competitor), num(w.gap), num(outcome.tol)]);
    }
    finish(
        cfg,
        verdict,
        warnings,
        FalsifyResult { expect_witness: cfg.expect_witness, found, hypothesis, outcome, recomputed },
        vec![table],
    )
}

#[derive(Serialize)]
struct ConvexityResult {
    hamiltonian: hamiltonian::HamiltonianInfo,
    expected: bool,
    verdict: hamiltonian::ConvexityVerdict,
}

fn run_convexity(cfg: &RunConfig) -> Result<RunOutput> {
    let (components, dim) = match &cfg.field {
        FieldSpec::Gallery(name) => {
            let f = gallery::get(name)?;
            (f.components, f.dim)
        }
        FieldSpec::Csv { .. } => (1, cfg.grid.lower.len()),
    };
    let h = hamiltonian_for(cfg, components, dim)?;
    let points = cfg.convexity.points.clone().unwrap_or_else(|| PointSampler::Box {
        lower: cfg.grid.lower.clone(),
        upper: cfg.grid.upper.clone(),
    });
    let opts = ConvexityOptions {
        segments: cfg.convexity.segments.unwrap_or(10_000),
        scale: cfg.convexity.scale.unwrap_or(1.0),
        seed: cfg.seed,
        tol: cfg.tol.unwrap_or(1e-12),
        ..Default::default()
    };
    let verdict = hamiltonian::check_rank_one_level_convexity(&h, &points, &opts)?;
    let expected = h.claimed_rank_one_level_convex.unwrap_or(true);
    let mut warnings = Vec::new();
    let outcome = match verdict.status {
        VerdictStatus::Inconclusive => {
            warnings.push(format!("worst margin {:.3e} lies in the rounding band", verdict.worst_margin));
            Outcome::Warn
        }
        _ if verdict.consistent_with(expected) => Outcome::Pass,
        _ => Outcome::Fail,
    };
    finish(cfg, outcome, warnings, ConvexityResult { hamiltonian: h.info(), expected, verdict }, vec![])
}

#[derive(Serialize)]
struct ResidualRow {
    h: f64,
    report: ResidualReport,
}

#[derive(Serialize)]
struct ResidualResult {
    target: ResidualTarget,
    rows: Vec<ResidualRow>,
    fitted_order: Option<f64>,
    min_order: f64,
    tol: f64,
}

/// Least-squares slope of `log sup` against `log h`.
pub fn fitted_order(hs: &[f64], sups: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        hs.iter().zip(sups).filter(|(_, s)| **s > 0.0).map(|(h, s)| (h.ln(), s.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn run_residual(cfg: &RunConfig) -> Result<RunOutput> {
    let target = cfg.residual.target.unwrap_or(ResidualTarget::System);
    let hs = cfg.residual.h.clone().unwrap_or_else(|| vec![cfg.grid.h]);
    if hs.is_empty() {
        return Err(Error::Config("empty residual sweep".into()));
    }
    let mut rows = Vec::new();
    let mut heat = Table::new("residual.csv", &[]);
    for &step in &hs {
        let grid = GridSpec { h: step, ..cfg.grid.clone() };
        let s = setup(cfg, &grid)?;
        let report = match target {
            ResidualTarget::Hj => {
                let h = hamiltonian_for(cfg, s.u.components(), s.domain.dim())?;
                let c = level_for(cfg, &s, &h)?;
                hj_residual(&h, &s.u, &s.mask, c)?
            }
            other => {
                let kind = match other {
                    ResidualTarget::Tangential => ResidualKind::Tangential,
                    ResidualTarget::Normal => ResidualKind::Normal,
                    _ => ResidualKind::System,
                };
                // FD residuals need a full stencil; trim one layer.
                let mask = if s.u.uses_analytic() { s.mask.clone() } else { s.mask.stencil_interior(&s.domain) };
                system_residual(&s.u, &mask, kind, cfg.residual.rank_tol)?
            }
        };
        if step == hs[hs.len() - 1] {
            let mut header: Vec<String> = (1..=s.domain.dim()).map(|i| format!("x{i}")).collect();
            header.push("residual".into());
            heat.header = header;
            heat.rows = report
                .samples
                .iter()
                .map(|&(i, v)| s.domain.point(i).into_iter().chain([v]).map(num).collect())
                .collect();
        }
        rows.push(ResidualRow { h: step, report });
    }
    let order = fitted_order(&hs, &rows.iter().map(|r| r.report.sup).collect::<Vec<_>>());
    let min_order = cfg.residual.min_order.unwrap_or(1.8);
    let finest = rows[rows.len() - 1].report.sup;
    let tol = cfg.tol.unwrap_or(if cfg.derivatives == DerivativeMode::Analytic { 1e-10 } else { 10.0 * hs[hs.len() - 1].powi(2) });
    // A residual at rounding level is exact; its order is meaningless.
    let pass = finest <= tol || order.is_some_and(|o| o >= min_order);
    let mut sweep = Table::new("residual_sweep.csv", &["h", "sup_residual"]);
    for r in &rows {
        sweep.rows.push(vec![num(r.h), num(r.report.sup)]);
    }
    if let Some(o) = order {
        sweep.footer.push(format!("fitted_order,{}", num(o)));
    }
    let outcome = if pass { Outcome::Pass } else { Outcome::Fail };
    finish(cfg, outcome, vec![], ResidualResult { target, rows, fitted_order: order, min_order, tol }, vec![heat, sweep])
}

#[derive(Serialize)]
struct MollifyResult {
    d0: f64,
    eps: Vec<f64>,
    shells: mollify::ShellDecomposition,
    partition: mollify::PartitionAudit,
    xi: Vec<f64>,
    perturbation: PiecewiseAffine,
    table: mollify::ConvergenceTable,
    /// Largest `measured / bound` over the rows.
    sharpest_ratio: f64,
}

fn bounding_box(domain: &GridDomain, mask: &SubdomainMask) -> (Vec<f64>, Vec<f64>) {
    let n = domain.dim();
    let (mut lo, mut hi) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
    for i in mask.indices() {
        for (k, v) in domain.point(i).into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (lo, hi)
}

fn run_mollify(cfg: &RunConfig) -> Result<RunOutput> {
    let s = setup(cfg, &cfg.grid)?;
    let d0 = cfg.mollify.d0.unwrap_or_else(|| mollify::default_d0(&s.domain, &s.mask));
    let eps = cfg.mollify.eps.clone().unwrap_or_else(|| vec![d0 / 2.0, d0 / 4.0, d0 / 8.0]);
    let eps_min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    // Unless capped, use as many rings as the finest kernel resolves.
    let max_shells = cfg.mollify.max_shells.unwrap_or(((eps_min / (2.0 * s.domain.h())) + 1e-9).floor().max(1.0) as usize);
    let shells = mollify::build_shells(&s.domain, &s.mask, d0, Some(max_shells))?;
    let partition = mollify::build_partition(&shells)?;
    let audit = partition.audit(&shells);
    let mut rng = stream_rng(cfg.seed, 0);
    let xi = match &cfg.xi {
        Some(x) => crate::tensor::unit_vector(x)?,
        None => {
            let v: Vec<f64> = (0..s.u.components()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            crate::tensor::unit_vector(&v)?
        }
    };
    let (lo, hi) = bounding_box(&s.domain, &s.mask);
    let g = PiecewiseAffine::random(lo, hi, cfg.mollify.slope.unwrap_or(2.0), cfg.mollify.planes.unwrap_or(3), cfg.seed);
    let nc = s.u.components();
    let values: Vec<f64> = (0..s.domain.len())
        .flat_map(|i| {
            let gv = g.value(&s.domain.point(i));
            let xi = &xi;
            s.u.values_at(i).iter().enumerate().map(move |(a, v)| v + xi[a] * gv).collect::<Vec<_>>()
        })
        .collect();
    let psi = GridField::from_values(s.domain.clone(), nc, values)?;
    let table = mollify::convergence_check(&psi, &s.mask, &xi, &eps, &shells, &partition)?;
    let mut bounds = Table::new("bounds.csv", &["l", "eps", "measured", "bound"]);
    for r in &table.rows {
        bounds.rows.push(vec![r.ring.to_string(), num(r.eps), num(r.measured), num(r.bound)]);
    }
    let sharpest = table
        .rows
        .iter()
        .filter(|r| r.bound > 0.0)
        .map(|r| r.measured / r.bound)
        .fold(0.0, f64::max);
    let mut warnings = Vec::new();
    if shells.truncated {
        warnings.push(format!("rings truncated at K = {} by grid resolution", shells.k));
    }
    let outcome = if table.all_ok && table.monotone && audit.ok() { Outcome::Pass } else { Outcome::Fail };
    let result = MollifyResult { d0, eps, shells, partition: audit, xi, perturbation: g, table, sharpest_ratio: sharpest };
    finish(cfg, outcome, warnings, result, vec![bounds])
}

#[derive(Serialize)]
struct JensenResult {
    expected: bool,
    trials: usize,
    passed: usize,
    worst_excess: f64,
    control: verify::JensenResult,
}

fn run_jensen(cfg: &RunConfig) -> Result<RunOutput> {
    let (components, dim) = match &cfg.field {
        FieldSpec::Gallery(name) => {
            let f = gallery::get(name)?;
            (f.components, f.dim)
        }
        FieldSpec::Csv { .. } => (1, cfg.grid.lower.len()),
    };
    let h = hamiltonian_for(cfg, components, dim)?;
    let x0 = vec![0.0; dim];
    let phi = |p: &[f64]| h.eval(&x0, &Mat::from_row_slice(components, dim, p)).unwrap_or(f64::NAN);
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    for t in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, t as u64);
        let k = rng.random_range(1..=8);
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        // Renormalisation leaves a rounding defect; fold it into the last weight.
        let defect = 1.0 - w.iter().sum::<f64>();
        w[k - 1] += defect;
        let f: Vec<Vec<f64>> =
            (0..k).map(|_| (0..components * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let r = verify::jensen_check(phi, &w, &f)?;
        if !r.lhs.is_finite() || !r.rhs.is_finite() {
            return Err(Error::HamiltonianContract("Φ is not finite on the sampled values".into()));
        }
        passed += r.pass as usize;
        worst = worst.max(r.lhs - r.rhs);
    }
    let annulus = |p: &[f64]| (p.iter().map(|a| a * a).sum::<f64>() - 1.0).abs();
    let mut e1 = vec![0.0; components * dim];
    e1[0] = 1.0;
    let minus: Vec<f64> = e1.iter().map(|v| -v).collect();
    let control = verify::jensen_check(annulus, &[0.5, 0.5], &[e1, minus])?;
    let expected = h.claimed_rank_one_level_convex.unwrap_or(true);
    let good_control = control.lhs == 1.0 && control.rhs == 0.0 && !control.pass;
    let consistent = if expected { passed == cfg.trials } else { passed < cfg.trials };
    let outcome = if consistent && good_control { Outcome::Pass } else { Outcome::Fail };
    finish(cfg, outcome, vec![], JensenResult { expected, trials: cfg.trials, passed, worst_excess: worst, control }, vec![])
}

/// JSON listing of the gallery.
pub fn gallery_listing() -> Result<String> {
    let entries = gallery::NAMES.iter().map(|n| gallery::get(n).map(|f| f.entry())).collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&entries)?)
}

/// Samples a gallery entry on a grid and writes it with its header line.
pub fn emit_gallery_csv(name: &str, grid: Option<&GridSpec>, dir: &Path) -> Result<PathBuf> {
    let f = gallery::get(name)?;
    let default = GridSpec { lower: vec![-1.0; f.dim], upper: vec![1.0; f.dim], h: 0.05 };
    let grid = grid.unwrap_or(&default);
    let domain = build_domain(grid)?;
    let u = f.sample(&domain)?;
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.csv"));
    write_with_header(&u, fs::File::create(&path)?)?;
    Ok(path)
}
