//! Minimality checks for rank-one variations, the discrete Jensen
//! inequality and a randomized search for non-minimisers.
//!
//! Minimality holds in the continuum; on a grid it can fail by `O(h)`. The
//! default tolerance is `4h(1 + Lip u)` and margins are also reported in
//! units of `h`.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::calculus::{fd_lipschitz, hj_residual, make_bump, rank_one_variation, BumpSpec};
use crate::error::{Error, Result};
use crate::functional::{ball_family, e_infty, local_functional, LocalFunctional, RadiusPolicy};
use crate::grid::{ball_mask, GridDomain, GridField, SubdomainMask};
use crate::hamiltonian::Hamiltonian;
use crate::seed::stream_rng;
use crate::tensor::{frobenius, unit_vector, Mat};

/// Outcome of `Φ(Σ wᵢ fᵢ) ≤ max{Φ(fᵢ) : wᵢ > 0}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JensenResult {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

pub fn jensen_check(phi: impl Fn(&[f64]) -> f64, weights: &[f64], values: &[Vec<f64>]) -> Result<JensenResult> {
    if weights.len() != values.len() || weights.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} values",
            weights.len(),
            values.len()
        )));
    }
    let n = values[0].len();
    if values.iter().any(|v| v.len() != n) {
        return Err(Error::DimensionMismatch("values of different lengths".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("weights must be finite and ≥ 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
    }
    let mean: Vec<f64> =
        (0..n).map(|k| weights.iter().zip(values).map(|(w, v)| w * v[k]).sum()).collect();
    let lhs = phi(&mean);
    let rhs = weights
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, v)| phi(v))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(JensenResult { lhs, rhs, pass: lhs <= rhs + 1e-12 })
}

/// The grid stand-in for "u is a C¹ solution of H(·, Du) = c".
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisGate {
    pub hj_residual: f64,
    pub tau: f64,
    pub c1_proxy_ok: bool,
    /// Largest `‖Du(x) − Du(y)‖` over neighbouring masked points.
    pub c1_max_jump: f64,
    pub c1_budget: f64,
    pub c1_worst_point: Vec<f64>,
    pub residual_worst_point: Vec<f64>,
    pub level: f64,
    pub met: bool,
    /// Residual within a factor two of `tau`.
    pub near_miss: bool,
}

/// `τ` defaults to `4h·Lip u`, the C¹ budget is `√h`.
pub fn hypothesis_gate(
    h: &Hamiltonian,
    u: &GridField,
    mask: &SubdomainMask,
    c: f64,
    tau: Option<f64>,
) -> Result<HypothesisGate> {
    let domain = u.domain();
    let res = hj_residual(h, u, mask, c)?;
    let lip = fd_lipschitz(u, mask)?;
    let tau = tau.unwrap_or(4.0 * domain.h() * lip);
    let budget = domain.h().sqrt();
    let idx = mask.indices();
    let grads: Vec<Mat> = idx.par_iter().map(|&i| u.gradient(i)).collect::<Result<_>>()?;
    let mut slot = vec![usize::MAX; domain.len()];
    for (k, &i) in idx.iter().enumerate() {
        slot[i] = k;
    }
    let mut worst = (0.0f64, idx[0]);
    for (k, &i) in idx.iter().enumerate() {
        for axis in 0..domain.dim() {
            if let Some(j) = domain.neighbor(i, axis, 1).filter(|&j| mask.contains(j)) {
                let jump = frobenius(&(&grads[k] - &grads[slot[j]]));
                if jump > worst.0 {
                    worst = (jump, i);
                }
            }
        }
    }
    let c1_ok = worst.0 <= budget;
    let met = res.sup <= tau && c1_ok;
    Ok(HypothesisGate {
        hj_residual: res.sup,
        tau,
        c1_proxy_ok: c1_ok,
        c1_max_jump: worst.0,
        c1_budget: budget,
        c1_worst_point: domain.point(worst.1),
        residual_worst_point: res.worst_point,
        level: c,
        met,
        near_miss: met && res.sup > tau / 2.0,
    })
}

/// Default tolerance `4h(1 + Lip u)`.
pub fn default_tol(u: &GridField, mask: &SubdomainMask) -> Result<f64> {
    Ok(4.0 * u.domain().h() * (1.0 + fd_lipschitz(u, mask)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallValue {
    pub center: Vec<f64>,
    pub rho: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub lhs: f64,
    pub balls: Vec<BallValue>,
    pub inf_rhs: f64,
    pub margin: f64,
    pub margin_in_h: f64,
    pub tol: f64,
    pub pass: bool,
    pub hypothesis: HypothesisGate,
    pub seed: Option<u64>,
    pub h: f64,
    pub xi: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct MinimalityOptions {
    pub tol: Option<f64>,
    pub tau: Option<f64>,
    pub radius: RadiusPolicy,
    pub seed: Option<u64>,
}

struct Comparison {
    lhs: f64,
    balls: Vec<BallValue>,
    inf_rhs: f64,
}

fn compare(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, xi: &[f64], phi: &GridField, policy: &RadiusPolicy) -> Result<Comparison> {
    let lhs = e_infty(h, u, mask)?.value;
    let family = ball_family(phi, mask, policy)?;
    let v = rank_one_variation(u, xi, phi)?;
    let mut balls = Vec::new();
    for ball in &family.balls {
        for (rho, m) in ball.radii.iter().zip(&ball.masks) {
            balls.push(BallValue { center: ball.center.clone(), rho: *rho, rhs: e_infty(h, &v, m)?.value });
        }
    }
    let inf_rhs = balls.iter().map(|b| b.rhs).fold(f64::INFINITY, f64::min);
    Ok(Comparison { lhs, balls, inf_rhs })
}

/// Compares `E∞(u, Ω′)` with `E∞(u + ξφ, B)` over the extremum balls of `φ`.
/// The hypothesis gate is evaluated and reported but does not stop the
/// comparison.
pub fn minimality_check(
    h: &Hamiltonian,
    u: &GridField,
    mask: &SubdomainMask,
    c: f64,
    xi: &[f64],
    phi: &GridField,
    opts: &MinimalityOptions,
) -> Result<VerifyReport> {
    let xi = unit_vector(xi)?;
    let hypothesis = hypothesis_gate(h, u, mask, c, opts.tau)?;
    let tol = match opts.tol {
        Some(t) => t,
        None => default_tol(u, mask)?,
    };
    let cmp = compare(h, u, mask, &xi, phi, &opts.radius)?;
    let margin = cmp.inf_rhs - cmp.lhs;
    let step = u.domain().h();
    Ok(VerifyReport {
        lhs: cmp.lhs,
        balls: cmp.balls,
        inf_rhs: cmp.inf_rhs,
        margin,
        margin_in_h: margin / step,
        tol,
        pass: margin >= -tol,
        hypothesis,
        seed: opts.seed,
        h: step,
        xi,
    })
}

/// Sum of bumps with summed analytic derivatives.
pub fn bump_field(specs: &[BumpSpec], domain: &GridDomain) -> Result<GridField> {
    let fields = specs.iter().map(|s| make_bump(s, domain)).collect::<Result<Vec<_>>>()?;
    let Some(first) = fields.first() else {
        return GridField::scalar_from_fn(domain.clone(), |_| 0.0);
    };
    let values: Vec<f64> = (0..domain.len()).map(|i| fields.iter().map(|f| f.value(i, 0)).sum()).collect();
    let (gs, hs) = (specs.to_vec(), specs.to_vec());
    let n = domain.dim();
    Ok(first
        .with_values(values)?
        .with_gradient(Arc::new(move |x| {
            let mut g = vec![0.0; n];
            for s in &gs {
                for (a, b) in g.iter_mut().zip(s.gradient(x)) {
                    *a += b;
                }
            }
            Mat::from_row_slice(1, n, &g)
        }))
        .with_hessian(Arc::new(move |x, _| hs.iter().fold(Mat::zeros(n, n), |acc, s| acc + s.hessian(x)))))
}

/// A rank-one variation `ξφ` with `φ` a sum of bumps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variation {
    pub xi: Vec<f64>,
    pub bumps: Vec<BumpSpec>,
}

impl Variation {
    pub fn phi(&self, domain: &GridDomain) -> Result<GridField> {
        bump_field(&self.bumps, domain)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if r > 1e-6 {
            return v.into_iter().map(|a| a / r).collect();
        }
    }
}

/// Random unit `ξ` and `1..=max_bumps` bumps supported strictly inside the
/// mask. Bump radii lie between `4h` and `max_radius`, amplitudes are at most
/// the radius so `|Dφ|` stays of order one.
pub fn sample_variation(
    domain: &GridDomain,
    mask: &SubdomainMask,
    components: usize,
    max_bumps: usize,
    max_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Variation> {
    let h = domain.h();
    let min_r = 4.0 * h;
    let depth = mask.distance_to_complement(domain);
    let candidates: Vec<usize> = mask.indices().into_iter().filter(|&i| depth[i] > min_r + 2.0 * h).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidInput(format!("mask `{}` too thin for bumps of radius 4h", mask.label())));
    }
    let xi = random_unit(rng, components);
    let count = rng.random_range(1..=max_bumps.max(1));
    let bumps = (0..count)
        .map(|_| {
            let i = candidates[rng.random_range(0..candidates.len())];
            let jitter: Vec<f64> = (0..domain.dim()).map(|_| rng.random_range(-0.5..0.5) * h).collect();
            let center: Vec<f64> = domain.point(i).iter().zip(&jitter).map(|(a, b)| a + b).collect();
            let hi = (depth[i] - 2.0 * h).min(max_radius).max(min_r);
            let radius = if hi > min_r { rng.random_range(min_r..hi) } else { min_r };
            let amplitude = radius * rng.random_range(0.1..1.0);
            let mut b = BumpSpec::new(center, radius, amplitude);
            b.sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            b
        })
        .collect();
    Ok(Variation { xi, bumps })
}

/// Where a falsifier competitor lives.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Subdomain {
    Ball { center: Vec<f64>, radius: f64 },
    /// The component of `{ξ·u < level}` (or `> level`) containing `seed_point`.
    Level { level: f64, upper: bool, seed_point: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Competitor {
    Bumps { bumps: Vec<BumpSpec> },
    /// `ξ·w ≡ level` on the subdomain, `[ξ]⊥w = [ξ]⊥u`.
    ConstantExtension,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalsifyWitness {
    pub xi: Vec<f64>,
    pub competitor: Competitor,
    pub subdomain: Subdomain,
    pub e_u: f64,
    pub e_competitor: f64,
    pub gap: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalsifyOutcome {
    pub witness: Option<FalsifyWitness>,
    pub best_gap: f64,
    pub trials: usize,
    pub level_candidates: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FalsifyOptions {
    pub budget: usize,
    pub seed: u64,
    pub tol: Option<f64>,
    /// Levels as fractions between the minimum and maximum of `ξ·u`.
    pub level_fractions: Vec<f64>,
}

impl Default for FalsifyOptions {
    fn default() -> Self {
        Self { budget: 200, seed: 0, tol: None, level_fractions: vec![0.1, 0.25, 0.5, 0.75, 0.9] }
    }
}

/// Connected component (3ⁿ-neighbourhood) of `{sign·(ξ·u − level) < 0}`
/// inside the mask containing `start`, or `None` if it touches the mask's
/// boundary.
fn level_component(u: &GridField, mask: &SubdomainMask, xi: &[f64], level: f64, upper: bool, start: usize) -> Option<SubdomainMask> {
    let domain = u.domain();
    let proj = |i: usize| u.values_at(i).iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
    let inside = |i: usize| if upper { proj(i) > level } else { proj(i) < level };
    if !mask.contains(start) || !inside(start) {
        return None;
    }
    let offsets = domain.neighborhood_offsets();
    let mut flags = vec![false; domain.len()];
    flags[start] = true;
    let mut stack = vec![start];
    while let Some(i) = stack.pop() {
        for o in &offsets {
            let j = domain.offset(i, o)?;
            if !mask.contains(j) {
                return None;
            }
            if !flags[j] && inside(j) {
                flags[j] = true;
                stack.push(j);
            }
        }
    }
    SubdomainMask::from_flags(domain, flags, mask.depth(), format!("level({level})")).ok()
}

fn constant_extension(u: &GridField, comp: &SubdomainMask, xi: &[f64], level: f64) -> Result<GridField> {
    let nc = u.components();
    let mut values = u.values().to_vec();
    for i in comp.indices() {
        let p: f64 = u.values_at(i).iter().zip(xi).map(|(a, b)| a * b).sum();
        for a in 0..nc {
            values[i * nc + a] += xi[a] * (level - p);
        }
    }
    GridField::from_values(u.domain().clone(), nc, values)
}

fn level_trial(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, xi: &[f64], level: f64, upper: bool, start: usize) -> Result<Option<FalsifyWitness>> {
    let Some(comp) = level_component(u, mask, xi, level, upper, start) else { return Ok(None) };
    let core = comp.stencil_interior(u.domain());
    if core.is_empty() {
        return Ok(None);
    }
    let w = constant_extension(u, &comp, xi, level)?;
    let e_u = e_infty(h, u, &core)?.value;
    let e_w = e_infty(h, &w, &core)?.value;
    Ok(Some(FalsifyWitness {
        xi: xi.to_vec(),
        competitor: Competitor::ConstantExtension,
        subdomain: Subdomain::Level { level, upper, seed_point: u.domain().point(start) },
        e_u,
        e_competitor: e_w,
        gap: e_u - e_w,
        points: core.count(),
    }))
}

/// Centres deep enough to carry a ball of radius `5h`.
fn bump_centres(domain: &GridDomain, mask: &SubdomainMask) -> Vec<usize> {
    let depth = mask.distance_to_complement(domain);
    mask.indices().into_iter().filter(|&i| depth[i] >= 5.0 * domain.h()).collect()
}

fn bump_trial(
    h: &Hamiltonian,
    u: &GridField,
    mask: &SubdomainMask,
    centres: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Option<FalsifyWitness>> {
    let domain = u.domain();
    let step = domain.h();
    if centres.is_empty() {
        return Ok(None);
    }
    let center = domain.point(centres[rng.random_range(0..centres.len())]);
    let Some(rmax) = crate::functional::maximal_radius(domain, mask, &center) else { return Ok(None) };
    if rmax < 4.0 * step {
        return Ok(None);
    }
    let radius = ((rng.random_range(4.0 * step..=rmax) / step).floor() * step).max(4.0 * step);
    let ball = match ball_mask(domain, mask, &center, radius) {
        Ok(b) => b,
        Err(Error::Containment(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let xi = random_unit(rng, u.components());
    let r = radius - step;
    let mut bump = BumpSpec::new(center.clone(), r, r * rng.random_range(0.05..1.0));
    bump.sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let bumps = vec![bump];
    let phi = bump_field(&bumps, domain)?;
    let v = rank_one_variation(u, &xi, &phi)?;
    let e_u = e_infty(h, u, &ball)?.value;
    let e_v = e_infty(h, &v, &ball)?.value;
    Ok(Some(FalsifyWitness {
        xi,
        competitor: Competitor::Bumps { bumps },
        subdomain: Subdomain::Ball { center, radius },
        e_u,
        e_competitor: e_v,
        gap: e_u - e_v,
        points: ball.count(),
    }))
}

fn level_starts(u: &GridField, mask: &SubdomainMask, xi: &[f64]) -> (usize, usize, f64, f64) {
    let idx = mask.indices();
    let proj = |i: usize| u.values_at(i).iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
    let (mut lo, mut hi) = (idx[0], idx[0]);
    for &i in &idx {
        if proj(i) < proj(lo) {
            lo = i;
        }
        if proj(i) > proj(hi) {
            hi = i;
        }
    }
    (lo, hi, proj(lo), proj(hi))
}

/// Searches for a competitor that agrees with `u` on the boundary of a
/// subdomain `D ⋐ Ω′` and has smaller `E∞` on `D`.
///
/// Two families are tried: single bumps on random balls, and constant
/// extensions of `ξ·u` on level-set components around its extrema for
/// `ξ = ±e_α`. The second family compares on the stencil interior of the
/// component, where difference quotients do not straddle its boundary.
pub fn falsify(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, opts: &FalsifyOptions) -> Result<FalsifyOutcome> {
    if opts.budget == 0 {
        return Err(Error::InvalidInput("falsifier budget must be ≥ 1".into()));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput("falsifier mask is empty".into()));
    }
    let tol = match opts.tol {
        Some(t) => t,
        None => default_tol(u, mask)?,
    };
    let mut level_jobs = Vec::new();
    for alpha in 0..u.components() {
        let mut xi = vec![0.0; u.components()];
        xi[alpha] = 1.0;
        let (lo, hi, pmin, pmax) = level_starts(u, mask, &xi);
        if pmax - pmin <= 1e-12 {
            continue;
        }
        for &f in &opts.level_fractions {
            level_jobs.push((xi.clone(), pmin + f * (pmax - pmin), false, lo));
            level_jobs.push((xi.clone(), pmax - f * (pmax - pmin), true, hi));
        }
    }
    let level_results: Vec<Option<FalsifyWitness>> = level_jobs
        .par_iter()
        .map(|(xi, level, upper, start)| level_trial(h, u, mask, xi, *level, *upper, *start))
        .collect::<Result<_>>()?;
    let centres = bump_centres(u.domain(), mask);
    let bump_results: Vec<Option<FalsifyWitness>> = (0..opts.budget)
        .into_par_iter()
        .map(|t| bump_trial(h, u, mask, &centres, &mut stream_rng(opts.seed, t as u64)))
        .collect::<Result<_>>()?;
    let mut best: Option<FalsifyWitness> = None;
    for w in level_results.into_iter().chain(bump_results).flatten() {
        if best.as_ref().is_none_or(|b| w.gap > b.gap) {
            best = Some(w);
        }
    }
    let best_gap = best.as_ref().map_or(f64::NEG_INFINITY, |w| w.gap);
    Ok(FalsifyOutcome {
        witness: best.filter(|w| w.gap > tol),
        best_gap,
        trials: opts.budget,
        level_candidates: level_jobs.len(),
        tol,
        seed: opts.seed,
    })
}

/// Rebuilds a witness's competitor from its description and returns
/// `(E∞(u, D), E∞(competitor, D))`.
pub fn recompute_witness(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, w: &FalsifyWitness) -> Result<(f64, f64)> {
    let domain = u.domain();
    match (&w.subdomain, &w.competitor) {
        (Subdomain::Ball { center, radius }, Competitor::Bumps { bumps }) => {
            let ball = ball_mask(domain, mask, center, *radius)?;
            let v = rank_one_variation(u, &w.xi, &bump_field(bumps, domain)?)?;
            Ok((e_infty(h, u, &ball)?.value, e_infty(h, &v, &ball)?.value))
        }
        (Subdomain::Level { level, upper, seed_point }, Competitor::ConstantExtension) => {
            let start = domain
                .nearest_index(seed_point)
                .ok_or_else(|| Error::InvalidInput("witness seed point off the grid".into()))?;
            let comp = level_component(u, mask, &w.xi, *level, *upper, start)
                .ok_or_else(|| Error::InvalidInput("witness level set is not compactly inside the mask".into()))?;
            let core = comp.stencil_interior(domain);
            let v = constant_extension(u, &comp, &w.xi, *level)?;
            Ok((e_infty(h, u, &core)?.value, e_infty(h, &v, &core)?.value))
        }
        _ => Err(Error::InvalidInput("witness subdomain and competitor do not match".into())),
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub max_bumps: usize,
    pub tol: Option<f64>,
    pub tau: Option<f64>,
    pub radius: RadiusPolicy,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { trials: 50, seed: 0, max_bumps: 3, tol: None, tau: None, radius: RadiusPolicy::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteTrial {
    pub submask: Subdomain,
    pub variation: Variation,
    pub lhs: f64,
    pub inf_rhs: f64,
    pub margin: f64,
    pub pass: bool,
    /// `E∞(u + ξφ, B_ρ(x))` for shrinking `ρ` at the first extremum centre.
    pub local: Option<LocalFunctional>,
    /// `lhs ≤ (smallest-ball local value) + tol`.
    pub local_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub hypothesis: HypothesisGate,
    pub tol: f64,
    pub trials: Vec<SuiteTrial>,
    pub pass_rate: f64,
    pub worst_margin: f64,
    pub worst_margin_in_h: f64,
    pub seed: u64,
}

/// Minimality over random sub-balls `Ω″ ⋐ Ω′`, random `ξ` and sums of bumps.
/// Refuses to run when the hypothesis gate fails.
pub fn rank_one_am_suite(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, c: f64, opts: &SuiteOptions) -> Result<SuiteReport> {
    let gate = hypothesis_gate(h, u, mask, c, opts.tau)?;
    if !gate.met {
        return Err(Error::HypothesisNotMet(format!(
            "HJ residual {:.3e} (τ = {:.3e}), C¹ proxy {} (max gradient jump {:.3e} at {:?}, budget {:.3e})",
            gate.hj_residual,
            gate.tau,
            if gate.c1_proxy_ok { "ok" } else { "failed" },
            gate.c1_max_jump,
            gate.c1_worst_point,
            gate.c1_budget
        )));
    }
    let tol = match opts.tol {
        Some(t) => t,
        None => default_tol(u, mask)?,
    };
    let domain = u.domain();
    let step = domain.h();
    let inradius = mask.inradius(domain);
    let idx = mask.indices();
    let trials: Vec<SuiteTrial> = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(opts.seed, t as u64);
            // Draw sub-balls until one fits and can carry a bump.
            let (sub, spec) = loop {
                let center = domain.point(idx[rng.random_range(0..idx.len())]);
                let radius = ((rng.random_range(0.3..1.0) * inradius / step).floor() * step).max(8.0 * step);
                if let Ok(b) = ball_mask(domain, mask, &center, radius) {
                    break (b, Subdomain::Ball { center, radius });
                }
            };
            let variation = sample_variation(domain, &sub, u.components(), opts.max_bumps, inradius / 2.0, &mut rng)?;
            let phi = variation.phi(domain)?;
            let cmp = compare(h, u, &sub, &variation.xi, &phi, &opts.radius)?;
            let margin = cmp.inf_rhs - cmp.lhs;
            let v = rank_one_variation(u, &variation.xi, &phi)?;
            let (local, local_ok) = match cmp.balls.first() {
                Some(b) => {
                    let mut rhos = vec![b.rho];
                    while rhos[rhos.len() - 1] / 2.0 >= 3.0 * step {
                        let next = ((rhos[rhos.len() - 1] / 2.0) / step).floor() * step;
                        if next < 3.0 * step * (1.0 - 1e-12) || next >= rhos[rhos.len() - 1] {
                            break;
                        }
                        rhos.push(next);
                    }
                    if b.rho >= 3.0 * step * (1.0 - 1e-12) {
                        let lf = local_functional(h, &v, &sub, &b.center, &rhos)?;
                        let ok = cmp.lhs <= lf.values[lf.values.len() - 1] + tol;
                        (Some(lf), Some(ok))
                    } else {
                        (None, None)
                    }
                }
                None => (None, None),
            };
            Ok(SuiteTrial {
                submask: spec,
                variation,
                lhs: cmp.lhs,
                inf_rhs: cmp.inf_rhs,
                margin,
                pass: margin >= -tol,
                local,
                local_ok,
            })
        })
        .collect::<Result<_>>()?;
    let passed = trials.iter().filter(|t| t.pass).count();
    let worst_margin = trials.iter().map(|t| t.margin).fold(f64::INFINITY, f64::min);
    Ok(SuiteReport {
        hypothesis: gate,
        tol,
        pass_rate: passed as f64 / trials.len().max(1) as f64,
        worst_margin,
        worst_margin_in_h: worst_margin / step,
        trials,
        seed: opts.seed,
    })
}
