//! Hamiltonians `H(x, P) ≥ 0` and sampling checks of rank-one level-convexity.

mod expr;

pub use expr::{BinOp, Expr, Func};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::tensor::{dir_projections, frobenius, outer, Mat};

#[derive(Clone, Debug, PartialEq)]
pub enum HamiltonianKind {
    /// `H(x, P) = |P|`.
    EuclideanNorm,
    /// `H(x, P) = a(x) |P|` with a positive weight expression in `x`.
    WeightedEikonal { weight: Expr },
    /// `H(x, P) = | |P|² − 1 |`, which is not rank-one level-convex.
    Annulus,
    Expression(Expr),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hamiltonian {
    kind: HamiltonianKind,
    components: usize,
    dim: usize,
    /// What the caller asserts about rank-one level-convexity; the checker
    /// compares its verdict against this.
    pub claimed_rank_one_level_convex: Option<bool>,
}

/// Serializable summary used in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianInfo {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    pub components: usize,
    pub dim: usize,
    pub claimed_rank_one_level_convex: Option<bool>,
}

fn check_dims(components: usize, dim: usize) -> Result<()> {
    if components == 0 || dim == 0 || components > 9 || dim > 9 {
        return Err(Error::InvalidInput(format!(
            "Hamiltonian dimensions must lie in 1..=9, got N={components}, n={dim}"
        )));
    }
    Ok(())
}

impl Hamiltonian {
    pub fn euclidean(components: usize, dim: usize) -> Result<Self> {
        check_dims(components, dim)?;
        Ok(Self {
            kind: HamiltonianKind::EuclideanNorm,
            components,
            dim,
            claimed_rank_one_level_convex: Some(true),
        })
    }

    pub fn annulus(components: usize, dim: usize) -> Result<Self> {
        check_dims(components, dim)?;
        Ok(Self {
            kind: HamiltonianKind::Annulus,
            components,
            dim,
            claimed_rank_one_level_convex: Some(false),
        })
    }

    /// `a(x)|P|`; `weight` is parsed as an expression in `x1..xn` only.
    pub fn weighted_eikonal(components: usize, dim: usize, weight: &str) -> Result<Self> {
        check_dims(components, dim)?;
        let weight = Expr::parse(weight, components, dim)?;
        if weight.depends_on_p() {
            return Err(Error::InvalidInput("eikonal weight may not depend on P".into()));
        }
        Ok(Self {
            kind: HamiltonianKind::WeightedEikonal { weight },
            components,
            dim,
            claimed_rank_one_level_convex: Some(true),
        })
    }

    /// A user expression over `x1..xn` and `P11..PNn`.
    pub fn parse(text: &str, components: usize, dim: usize) -> Result<Self> {
        check_dims(components, dim)?;
        Ok(Self {
            kind: HamiltonianKind::Expression(Expr::parse(text, components, dim)?),
            components,
            dim,
            claimed_rank_one_level_convex: None,
        })
    }

    pub fn with_claim(mut self, claim: Option<bool>) -> Self {
        self.claimed_rank_one_level_convex = claim;
        self
    }

    pub fn kind(&self) -> &HamiltonianKind {
        &self.kind
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depends_on_x(&self) -> bool {
        match &self.kind {
            HamiltonianKind::EuclideanNorm | HamiltonianKind::Annulus => false,
            HamiltonianKind::WeightedEikonal { weight } => weight.depends_on_x(),
            HamiltonianKind::Expression(e) => e.depends_on_x(),
        }
    }

    pub fn info(&self) -> HamiltonianInfo {
        let (kind, expression) = match &self.kind {
            HamiltonianKind::EuclideanNorm => ("euclidean-norm", None),
            HamiltonianKind::WeightedEikonal { weight } => ("weighted-eikonal", Some(weight.to_string())),
            HamiltonianKind::Annulus => ("annulus", None),
            HamiltonianKind::Expression(e) => ("custom-expression", Some(e.to_string())),
        };
        HamiltonianInfo {
            kind: kind.into(),
            expression,
            components: self.components,
            dim: self.dim,
            claimed_rank_one_level_convex: self.claimed_rank_one_level_convex,
        }
    }

    /// `H(x, P)`; fails when the value is negative or not finite.
    pub fn eval(&self, x: &[f64], p: &Mat) -> Result<f64> {
        if x.len() != self.dim || p.nrows() != self.components || p.ncols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "H expects x ∈ ℝ^{} and P ∈ ℝ^{{{}×{}}}, got x ∈ ℝ^{} and P ∈ ℝ^{{{}×{}}}",
                self.dim,
                self.components,
                self.dim,
                x.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        let v = match &self.kind {
            HamiltonianKind::EuclideanNorm => frobenius(p),
            HamiltonianKind::Annulus => (p.norm_squared() - 1.0).abs(),
            HamiltonianKind::WeightedEikonal { weight } => {
                let a = weight.eval(x, p)?;
                if a <= 0.0 {
                    return Err(Error::HamiltonianContract(format!(
                        "eikonal weight {a} ≤ 0 at x = {x:?}"
                    )));
                }
                a * frobenius(p)
            }
            HamiltonianKind::Expression(e) => e.eval(x, p)?,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::HamiltonianContract(format!(
                "H(x, P) = {v} at x = {x:?}; Hamiltonians must be finite and nonnegative"
            )));
        }
        Ok(v)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random rank-one segment: `A` with Gaussian entries of standard deviation
/// `scale` and `B = A + ξ⊗η` with Gaussian `ξ ∈ ℝᴺ`, `η ∈ ℝⁿ`.
pub fn rank_one_segment_sample(components: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
    let a = Mat::from_fn(components, dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let xi = gaussian_vec(rng, components, 1.0);
    let eta = gaussian_vec(rng, dim, scale);
    let b = &a + outer(&xi, &eta);
    (a, b)
}

/// Where to draw the base point `x` of each segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSampler {
    Fixed(Vec<f64>),
    /// Uniform on the box `[lower, upper]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl PointSampler {
    pub fn origin(dim: usize) -> Self {
        PointSampler::Fixed(vec![0.0; dim])
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            PointSampler::Fixed(x) => x.clone(),
            PointSampler::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            PointSampler::Fixed(x) => x.len(),
            PointSampler::Box { lower, .. } => lower.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvexityOptions {
    pub segments: usize,
    /// Fixed interpolation parameters, all in `(0, 1)`.
    pub lambdas: Vec<f64>,
    /// Extra uniform draws of `λ` per segment.
    pub random_lambdas: usize,
    pub scale: f64,
    pub seed: u64,
    /// Relative tolerance; the absolute slack is `tol · (1 + max{H(A), H(B)})`.
    pub tol: f64,
    /// Also test the antipodal pairs `C ± tR` around `C = 0` and `C = A`, with
    /// `R` the unit rank-one direction of each segment.
    pub centred_probes: bool,
    /// Segments `(x, A, B)` tested in addition to the random ones.
    pub extra_segments: Vec<(Vec<f64>, Mat, Mat)>,
}

impl Default for ConvexityOptions {
    fn default() -> Self {
        Self {
            segments: 10_000,
            lambdas: (1..8).map(|k| k as f64 / 8.0).collect(),
            random_lambdas: 10,
            scale: 1.0,
            seed: 0,
            tol: 1e-12,
            centred_probes: true,
            extra_segments: Vec::new(),
        }
    }
}

const PROBE_SCALES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Inconclusive,
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A sampled violation `H(x, λA + (1−λ)B) > max{H(x,A), H(x,B)}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityWitness {
    pub x: Vec<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub a: Mat,
    #[serde(serialize_with = "ser_mat")]
    pub b: Mat,
    pub lambda: f64,
    pub h_mid: f64,
    pub h_max_end: f64,
    /// `h_mid − h_max_end`.
    pub margin: f64,
}

fn ser_mat<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    rows(m).serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityVerdict {
    pub status: VerdictStatus,
    pub witness: Option<ConvexityWitness>,
    /// Number of `(x, A, B, λ)` evaluations performed.
    pub samples_used: usize,
    /// Largest observed `H(mid) − max{H(A), H(B)}`, possibly negative.
    pub worst_margin: f64,
}

impl ConvexityVerdict {
    /// Whether the verdict agrees with a claim of rank-one level-convexity.
    /// An inconclusive verdict agrees with neither claim.
    pub fn consistent_with(&self, claim: bool) -> bool {
        match self.status {
            VerdictStatus::Pass => claim,
            VerdictStatus::Fail => !claim,
            VerdictStatus::Inconclusive => false,
        }
    }
}

struct Scan {
    worst: Option<(f64, f64, ConvexityWitness)>,
    samples: usize,
}

impl Scan {
    fn new() -> Self {
        Scan { worst: None, samples: 0 }
    }

    fn segment(&mut self, h: &Hamiltonian, x: &[f64], a: &Mat, b: &Mat, lambdas: &[f64], tol: f64) -> Result<()> {
        let ha = h.eval(x, a)?;
        let hb = h.eval(x, b)?;
        let top = ha.max(hb);
        let slack = tol * (1.0 + top);
        for &lambda in lambdas {
            let mid = a * lambda + b * (1.0 - lambda);
            let hm = h.eval(x, &mid)?;
            self.samples += 1;
            let margin = hm - top;
            // Ranked by violation relative to the slack so that large-scale
            // segments do not hide a sharper small-scale witness.
            let rel = margin / slack;
            if self.worst.as_ref().is_none_or(|(r, _, _)| rel > *r) {
                self.worst = Some((
                    rel,
                    slack,
                    ConvexityWitness {
                        x: x.to_vec(),
                        a: a.clone(),
                        b: b.clone(),
                        lambda,
                        h_mid: hm,
                        h_max_end: top,
                        margin,
                    },
                ));
            }
        }
        Ok(())
    }

    fn merge(mut self, other: Scan) -> Scan {
        self.samples += other.samples;
        if let Some(o) = other.worst {
            if self.worst.as_ref().is_none_or(|(r, _, _)| o.0 > *r) {
                self.worst = Some(o);
            }
        }
        self
    }
}

/// Searches for violations of `H(x, λA + (1−λ)B) ≤ max{H(x,A), H(x,B)}` on
/// random rank-one segments.
///
/// `Pass` only means no counterexample was found. A violation larger than
/// the slack but within 100 times of it is reported as `Inconclusive`, since
/// it cannot be told apart from accumulated rounding.
pub fn check_rank_one_level_convexity(
    h: &Hamiltonian,
    points: &PointSampler,
    opts: &ConvexityOptions,
) -> Result<ConvexityVerdict> {
    if opts.segments == 0 && opts.extra_segments.is_empty() {
        return Err(Error::InvalidInput("need at least one segment".into()));
    }
    if opts.lambdas.iter().any(|&l| !(l > 0.0 && l < 1.0)) || (opts.lambdas.is_empty() && opts.random_lambdas == 0) {
        return Err(Error::InvalidInput("λ-grid must be a non-empty subset of (0, 1)".into()));
    }
    if points.dim() != h.dim() {
        return Err(Error::DimensionMismatch("point sampler dimension differs from H".into()));
    }
    let (nc, nd) = (h.components(), h.dim());
    let scans: Vec<Scan> = (0..opts.segments)
        .into_par_iter()
        .map(|s| -> Result<Scan> {
            let mut rng = stream_rng(opts.seed, s as u64);
            let x = points.sample(&mut rng);
            let (a, b) = rank_one_segment_sample(nc, nd, opts.scale, &mut rng);
            let mut lambdas = opts.lambdas.clone();
            lambdas.extend((0..opts.random_lambdas).map(|_| rng.random_range(f64::EPSILON..1.0)));
            let mut scan = Scan::new();
            scan.segment(h, &x, &a, &b, &lambdas, opts.tol)?;
            if opts.centred_probes {
                let d = &b - &a;
                let norm = frobenius(&d);
                if norm > 0.0 {
                    let r = d / norm;
                    let zero = Mat::zeros(nc, nd);
                    for centre in [&zero, &a] {
                        for t in PROBE_SCALES {
                            let step = &r * (t * opts.scale);
                            scan.segment(h, &x, &(centre + &step), &(centre - &step), &opts.lambdas, opts.tol)?;
                        }
                    }
                }
            }
            Ok(scan)
        })
        .collect::<Result<_>>()?;
    let mut total = scans.into_iter().fold(Scan::new(), Scan::merge);
    for (x, a, b) in &opts.extra_segments {
        let mut scan = Scan::new();
        let mut lambdas = opts.lambdas.clone();
        if !lambdas.contains(&0.5) {
            lambdas.push(0.5);
        }
        scan.segment(h, x, a, b, &lambdas, opts.tol)?;
        total = total.merge(scan);
    }
    let (rel, _, witness) = total.worst.expect("at least one sample");
    let status = if rel <= 1.0 {
        VerdictStatus::Pass
    } else if rel <= 100.0 {
        VerdictStatus::Inconclusive
    } else {
        VerdictStatus::Fail
    };
    let worst_margin = witness.margin;
    Ok(ConvexityVerdict {
        status,
        witness: (status != VerdictStatus::Pass).then_some(witness),
        samples_used: total.samples,
        worst_margin,
    })
}

/// The section `Ψ(p) = H(x, ξ⊗p + [ξ]⊥F)` of `H` along the direction `ξ`.
#[derive(Clone, Debug)]
pub struct PsiSection<'a> {
    h: &'a Hamiltonian,
    x: Vec<f64>,
    xi: Vec<f64>,
    fixed: Mat,
}

impl PsiSection<'_> {
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.h.dim() {
            return Err(Error::DimensionMismatch(format!("Ψ expects p ∈ ℝ^{}", self.h.dim())));
        }
        self.h.eval(&self.x, &(outer(&self.xi, p) + &self.fixed))
    }

    /// The fixed part `[ξ]⊥F`.
    pub fn fixed_part(&self) -> &Mat {
        &self.fixed
    }
}

pub fn psi_section<'a>(h: &'a Hamiltonian, x: &[f64], xi: &[f64], f: &Mat) -> Result<PsiSection<'a>> {
    if x.len() != h.dim() || xi.len() != h.components() || f.nrows() != h.components() || f.ncols() != h.dim() {
        return Err(Error::DimensionMismatch(
            "Ψ-section needs x ∈ ℝⁿ, ξ ∈ ℝᴺ and F ∈ ℝ^{N×n} matching H".into(),
        ));
    }
    let pair = dir_projections(xi)?;
    let xi: Vec<f64> = pair.direction.iter().copied().collect();
    Ok(PsiSection { h, x: x.to_vec(), fixed: &pair.perp * f, xi })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiReport {
    pub trials: usize,
    /// Largest `Ψ(λp + (1−λ)q) − max{Ψ(p), Ψ(q)}`.
    pub worst_margin: f64,
    pub passed: bool,
}

/// Samples `(x, ξ, F, p, q, λ)` and checks level-convexity of each section.
pub fn sample_psi_level_convexity(
    h: &Hamiltonian,
    points: &PointSampler,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<PsiReport> {
    let (nc, nd) = (h.components(), h.dim());
    let margins: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let mut rng = stream_rng(seed, t as u64);
            let x = points.sample(&mut rng);
            let mut xi = gaussian_vec(&mut rng, nc, 1.0);
            if xi.iter().all(|v| *v == 0.0) {
                xi[0] = 1.0;
            }
            let f = Mat::from_fn(nc, nd, |_, _| rng.sample::<f64, _>(StandardNormal));
            let psi = psi_section(h, &x, &xi, &f)?;
            let p = gaussian_vec(&mut rng, nd, 1.0);
            let q = gaussian_vec(&mut rng, nd, 1.0);
            let lambda: f64 = rng.random_range(0.0..1.0);
            let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            Ok(psi.eval(&mid)? - psi.eval(&p)?.max(psi.eval(&q)?))
        })
        .collect::<Result<_>>()?;
    let worst_margin = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PsiReport { trials, worst_margin, passed: worst_margin <= tol })
}
