//! Shell-wise mollification of the `ξ`-component of a map.
//!
//! The masked region is cut into shells `Ω_k = {dist(x, ∂Ω′) > d₀/k}` and
//! rings `V_k = Ω_k \ Ω_{k−1}`. A partition of unity subordinate to triples of
//! neighbouring rings blends mollifications of radius `ε/k`, so the kernel
//! shrinks towards the boundary and boundary values are preserved.
//!
//! On a grid only finitely many rings can be resolved. The last ring `V_K`
//! absorbs every masked point closer to the boundary than `d₀/(K−1)`;
//! [`ShellDecomposition::truncated`] records when this happened.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{interior_extrema, ExtremumKind, GridDomain, GridField, SubdomainMask};
use crate::tensor::dir_projections;

/// The standard bump `exp(1/(|y|²/r² − 1))` on the lattice, renormalised to
/// unit discrete mass.
#[derive(Clone, Debug)]
pub struct MollifierKernel {
    radius: f64,
    offsets: Vec<Vec<isize>>,
    weights: Vec<f64>,
}

impl MollifierKernel {
    /// A kernel narrower than one cell degenerates to the point mass.
    pub fn new(domain: &GridDomain, radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidInput(format!("kernel radius must be ≥ 0, got {radius}")));
        }
        let n = domain.dim();
        let h = domain.h();
        let reach = (radius / h).floor() as isize;
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        let mut o = vec![-reach; n];
        loop {
            let s2 = o.iter().map(|&k| (k as f64 * h).powi(2)).sum::<f64>() / (radius * radius).max(f64::MIN_POSITIVE);
            if s2 < 1.0 {
                let w = (1.0 / (s2 - 1.0)).exp();
                if w > 0.0 {
                    offsets.push(o.clone());
                    weights.push(w);
                }
            }
            let mut axis = 0;
            loop {
                if axis == n {
                    let mass: f64 = weights.iter().sum();
                    if weights.is_empty() {
                        return Ok(Self { radius, offsets: vec![vec![0; n]], weights: vec![1.0] });
                    }
                    weights.iter_mut().for_each(|w| *w /= mass);
                    return Ok(Self { radius, offsets, weights });
                }
                o[axis] += 1;
                if o[axis] <= reach {
                    break;
                }
                o[axis] = -reach;
                axis += 1;
            }
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(f ∗ η)(x_idx)` for point-major values with `comps` components.
    pub fn apply(&self, domain: &GridDomain, values: &[f64], comps: usize, idx: usize, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (o, &w) in self.offsets.iter().zip(&self.weights) {
            let j = domain.offset(idx, o).ok_or_else(|| Error::OutOfStencil {
                index: idx,
                detail: format!("kernel of radius {} leaves the grid", self.radius),
            })?;
            for (a, v) in out.iter_mut().enumerate() {
                *v += w * values[j * comps + a];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ShellDecomposition {
    pub d0: f64,
    /// Number of rings.
    pub k: usize,
    /// Whether rings were merged into `V_K` because they could not be resolved.
    pub truncated: bool,
    /// Nominal width of each ring, `widths[k−1]` for `V_k`.
    pub widths: Vec<f64>,
    #[serde(skip)]
    pub depth: Vec<f64>,
    /// `ring[idx] = k` for `idx ∈ V_k`, `0` off the mask.
    #[serde(skip)]
    pub ring: Vec<usize>,
    #[serde(skip)]
    domain: Option<GridDomain>,
}

impl ShellDecomposition {
    /// `Ω_k` as a boolean map; `Ω_0 = ∅`.
    pub fn shell(&self, k: usize) -> Vec<bool> {
        self.ring.iter().map(|&r| r >= 1 && r <= k && k >= 1).collect()
    }

    /// The points of `V_k`.
    pub fn ring_points(&self, k: usize) -> Vec<usize> {
        (0..self.ring.len()).filter(|&i| self.ring[i] == k).collect()
    }

    fn domain(&self) -> &GridDomain {
        self.domain.as_ref().expect("shells carry their grid")
    }
}

/// Default `d₀`: a third of the mask's inradius.
pub fn default_d0(domain: &GridDomain, mask: &SubdomainMask) -> f64 {
    mask.inradius(domain) / 3.0
}

/// Cuts `mask` into rings. `max_shells` caps the ring count further than the
/// resolution limit `d₀/(k(k−1)) ≥ 2h`.
pub fn build_shells(
    domain: &GridDomain,
    mask: &SubdomainMask,
    d0: f64,
    max_shells: Option<usize>,
) -> Result<ShellDecomposition> {
    if !(d0 > 0.0 && d0.is_finite()) {
        return Err(Error::Parameter(format!("d₀ must be positive, got {d0}")));
    }
    let depth = mask.distance_to_complement(domain);
    let masked: Vec<usize> = mask.indices();
    if !masked.iter().any(|&i| depth[i] > d0) {
        return Err(Error::Parameter(format!(
            "Ω₁ is empty for d₀ = {d0}; the inradius is {}, choose a smaller d₀",
            mask.inradius(domain)
        )));
    }
    let h = domain.h();
    let min_depth = masked.iter().map(|&i| depth[i]).fold(f64::INFINITY, f64::min);
    let mut k_cover = 1;
    while d0 / k_cover as f64 >= min_depth {
        k_cover += 1;
    }
    let mut k_res = 1;
    while d0 / ((k_res + 1) * k_res) as f64 >= 2.0 * h {
        k_res += 1;
    }
    let k = k_cover.min(k_res).min(max_shells.unwrap_or(usize::MAX)).max(1);
    let truncated = k < k_cover;
    let mut ring = vec![0usize; domain.len()];
    for &i in &masked {
        let mut r = 1;
        while r < k && depth[i] <= d0 / r as f64 {
            r += 1;
        }
        ring[i] = r;
    }
    let inradius = mask.inradius(domain);
    let widths = (1..=k)
        .map(|j| match j {
            1 if k == 1 => inradius,
            1 => inradius - d0,
            j if j == k && truncated => d0 / (j - 1) as f64,
            j => d0 / (j * (j - 1)) as f64,
        })
        .collect();
    Ok(ShellDecomposition { d0, k, truncated, widths, depth, ring, domain: Some(domain.clone()) })
}

#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    /// `weights[k−1][idx] = ζ_k(x_idx)`, zero off the mask.
    pub weights: Vec<Vec<f64>>,
    /// Radius used to mollify the ring indicators.
    pub radius: f64,
}

impl PartitionOfUnity {
    pub fn zeta(&self, k: usize, idx: usize) -> f64 {
        self.weights[k - 1][idx]
    }

    /// Pointwise check of the partition properties on every grid point.
    pub fn audit(&self, shells: &ShellDecomposition) -> PartitionAudit {
        let mut audit = PartitionAudit { max_sum_error: 0.0, negative: 0, support_violations: 0, unsupported_ring_points: 0 };
        for (i, &r) in shells.ring.iter().enumerate() {
            let sum: f64 = self.weights.iter().map(|w| w[i]).sum();
            if r > 0 {
                audit.max_sum_error = audit.max_sum_error.max((sum - 1.0).abs());
            }
            for (k, w) in self.weights.iter().enumerate() {
                let k = k + 1;
                audit.negative += (w[i] < 0.0) as usize;
                audit.support_violations += (w[i] != 0.0 && (r == 0 || r.abs_diff(k) > 1)) as usize;
                audit.unsupported_ring_points += (r == k && w[i] <= 0.0) as usize;
            }
        }
        audit
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionAudit {
    pub max_sum_error: f64,
    pub negative: usize,
    /// Nonzero `ζ_k` outside `V_{k−1} ∪ V_k ∪ V_{k+1}`.
    pub support_violations: usize,
    /// Points of `V_k` where `ζ_k` vanishes.
    pub unsupported_ring_points: usize,
}

impl PartitionAudit {
    pub fn ok(&self) -> bool {
        self.max_sum_error <= 1e-12 && self.negative == 0 && self.support_violations == 0 && self.unsupported_ring_points == 0
    }
}

/// Mollifies each ring indicator with radius `¼·min width`, clips to the
/// three neighbouring rings and renormalises.
pub fn build_partition(shells: &ShellDecomposition) -> Result<PartitionOfUnity> {
    let domain = shells.domain();
    let h = domain.h();
    let min_width = shells.widths.iter().copied().fold(f64::INFINITY, f64::min);
    if shells.k > 1 && min_width < 2.0 * h {
        return Err(Error::Resolution(format!(
            "thinnest ring is {min_width}, below two cells (2h = {})",
            2.0 * h
        )));
    }
    let radius = if shells.k > 1 { min_width / 4.0 } else { 0.0 };
    let kernel = MollifierKernel::new(domain, radius)?;
    let masked: Vec<usize> = (0..domain.len()).filter(|&i| shells.ring[i] > 0).collect();
    let raw: Vec<Vec<f64>> = (1..=shells.k)
        .map(|k| {
            let chi: Vec<f64> = shells.ring.iter().map(|&r| if r == k { 1.0 } else { 0.0 }).collect();
            let mut w = vec![0.0; domain.len()];
            let vals: Vec<(usize, f64)> = masked
                .par_iter()
                .filter(|&&i| shells.ring[i].abs_diff(k) <= 1)
                .map(|&i| {
                    let mut out = [0.0];
                    kernel.apply(domain, &chi, 1, i, &mut out)?;
                    Ok((i, out[0]))
                })
                .collect::<Result<_>>()?;
            for (i, v) in vals {
                w[i] = v;
            }
            Ok(w)
        })
        .collect::<Result<_>>()?;
    let mut weights = raw;
    for &i in &masked {
        let sum: f64 = weights.iter().map(|w| w[i]).sum();
        for w in weights.iter_mut() {
            w[i] /= sum;
        }
    }
    Ok(PartitionOfUnity { weights, radius })
}

/// `ψ^ε = ξ ⊗ Σ_k ζ_k ((ξ·ψ) ∗ η^{ε/k}) + [ξ]⊥ψ` on the mask; `ψ` elsewhere.
///
/// Evaluated as `ψ + ξ(s − ξ·ψ)` so that components orthogonal to an
/// axis-aligned `ξ` are copied bit for bit.
pub fn smooth(
    psi: &GridField,
    xi: &[f64],
    eps: f64,
    shells: &ShellDecomposition,
    partition: &PartitionOfUnity,
) -> Result<GridField> {
    let domain = psi.domain();
    if !domain.same_lattice(shells.domain()) {
        return Err(Error::DimensionMismatch("ψ and the shells live on different grids".into()));
    }
    if !(eps > 0.0 && eps < shells.d0) {
        return Err(Error::Parameter(format!("ε = {eps} must lie in (0, d₀ = {})", shells.d0)));
    }
    let h = domain.h();
    if eps / (shells.k as f64) < 2.0 * h {
        return Err(Error::Resolution(format!(
            "finest kernel ε/K = {} is below 2h = {}",
            eps / shells.k as f64,
            2.0 * h
        )));
    }
    let pair = dir_projections(xi)?;
    let xi: Vec<f64> = pair.direction.iter().copied().collect();
    if xi.len() != psi.components() {
        return Err(Error::DimensionMismatch("ξ length differs from the field's components".into()));
    }
    let nc = psi.components();
    let proj: Vec<f64> = (0..domain.len())
        .map(|i| psi.values_at(i).iter().zip(&xi).map(|(a, b)| a * b).sum())
        .collect();
    let kernels = (1..=shells.k)
        .map(|k| MollifierKernel::new(domain, eps / k as f64))
        .collect::<Result<Vec<_>>>()?;
    let updates: Vec<(usize, f64)> = (0..domain.len())
        .into_par_iter()
        .filter(|&i| shells.ring[i] > 0)
        .map(|i| {
            let mut s = 0.0;
            for (k, kernel) in kernels.iter().enumerate() {
                let z = partition.weights[k][i];
                if z > 0.0 {
                    let mut out = [0.0];
                    kernel.apply(domain, &proj, 1, i, &mut out)?;
                    s += z * out[0];
                }
            }
            Ok((i, s - proj[i]))
        })
        .collect::<Result<_>>()?;
    let mut values = psi.values().to_vec();
    for (i, delta) in updates {
        for a in 0..nc {
            values[i * nc + a] += xi[a] * delta;
        }
    }
    GridField::from_values(domain.clone(), nc, values)
}

/// `sup over the mask of |ψ ∗ η^τ − ψ|` for one radius.
pub fn mollification_deviation(psi: &GridField, mask: &SubdomainMask, tau: f64) -> Result<f64> {
    let domain = psi.domain();
    let kernel = MollifierKernel::new(domain, tau)?;
    let nc = psi.components();
    let devs: Vec<f64> = mask
        .indices()
        .par_iter()
        .map(|&i| {
            let mut out = vec![0.0; nc];
            kernel.apply(domain, psi.values(), nc, i, &mut out)?;
            Ok(out.iter().zip(psi.values_at(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// Modulus of continuity built from sampled mollification deviations
/// `‖ψ∗η^τ − ψ‖`.
///
/// The raw samples of a discrete kernel need not be subadditive, so `ω` is
/// the least concave majorant of the running maximum through the origin. It
/// is nondecreasing, subadditive and never below a sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModulusTable {
    pub taus: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Vertices of the majorant, starting at `(0, 0)`.
    pub hull: Vec<(f64, f64)>,
}

impl ModulusTable {
    pub fn from_samples(taus: Vec<f64>, deviations: Vec<f64>) -> Self {
        let mut hull: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        let mut running = 0.0f64;
        for (&t, &d) in taus.iter().zip(&deviations) {
            running = running.max(d);
            let p = (t, running);
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                // Drop b when it lies on or below the chord a→p.
                if (b.1 - a.1) * (p.0 - a.0) <= (p.1 - a.1) * (b.0 - a.0) {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        Self { taus, deviations, hull }
    }

    pub fn omega(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        for w in self.hull.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        self.hull.last().map_or(0.0, |p| p.1)
    }
}

/// Geometric radius grid `t·2^{−j/2}`, `j = 0..per_t`, below every `t`.
pub fn geometric_taus(t_grid: &[f64], per_t: usize) -> Vec<f64> {
    let mut taus: Vec<f64> = t_grid
        .iter()
        .flat_map(|&t| (0..per_t.max(1)).map(move |j| t * 2f64.powf(-(j as f64) / 2.0)))
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs());
    taus
}

pub fn modulus(psi: &GridField, mask: &SubdomainMask, taus: &[f64]) -> Result<ModulusTable> {
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let deviations = taus
        .iter()
        .map(|&t| mollification_deviation(psi, mask, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModulusTable::from_samples(taus, deviations))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    #[serde(rename = "l")]
    pub ring: usize,
    #[serde(rename = "eps")]
    pub eps: f64,
    pub measured: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<BoundRow>,
    /// `max over rings of the measured difference`, one entry per `ε`.
    pub sup_by_eps: Vec<f64>,
    pub monotone: bool,
    pub all_ok: bool,
    pub shells: usize,
    pub truncated: bool,
    pub modulus: ModulusTable,
}

/// Measures `‖ψ^ε − ψ‖` on each ring against `3ω(ε/(l−1))` (`l ≥ 2`) and
/// `2ω(ε)` (`l = 1`). The modulus is sampled at every radius `ε/k` used.
pub fn convergence_check(
    psi: &GridField,
    mask: &SubdomainMask,
    xi: &[f64],
    eps_seq: &[f64],
    shells: &ShellDecomposition,
    partition: &PartitionOfUnity,
) -> Result<ConvergenceTable> {
    if eps_seq.is_empty() || eps_seq.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("ε sequence must be strictly decreasing".into()));
    }
    let mut taus = geometric_taus(&[eps_seq[0]], 12);
    for &e in eps_seq {
        taus.extend((1..=shells.k).map(|k| e / k as f64));
    }
    let table = modulus(psi, mask, &taus)?;
    let mut rows = Vec::new();
    let mut sup_by_eps = Vec::new();
    for &eps in eps_seq {
        let smoothed = smooth(psi, xi, eps, shells, partition)?;
        let nc = psi.components();
        let mut sup = 0.0f64;
        for l in 1..=shells.k {
            let measured = shells
                .ring_points(l)
                .iter()
                .map(|&i| {
                    (0..nc)
                        .map(|a| (smoothed.value(i, a) - psi.value(i, a)).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            let bound = if l == 1 { 2.0 * table.omega(eps) } else { 3.0 * table.omega(eps / (l - 1) as f64) };
            sup = sup.max(measured);
            rows.push(BoundRow { ring: l, eps, measured, bound, ok: measured <= bound + 1e-10 });
        }
        sup_by_eps.push(sup);
    }
    let monotone = sup_by_eps.windows(2).all(|w| w[1] <= w[0] + 1e-10);
    let all_ok = rows.iter().all(|r| r.ok);
    Ok(ConvergenceTable {
        rows,
        sup_by_eps,
        monotone,
        all_ok,
        shells: shells.k,
        truncated: shells.truncated,
        modulus: table,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackReport {
    /// The tracked extremum of each field, `None` when none of the right kind
    /// exists.
    pub points: Vec<Option<Vec<f64>>>,
    pub deviations: Vec<Option<f64>>,
    pub max_deviation: Option<f64>,
    /// Whether each tracked point lies in `B_{ρ/2}(x₀)`.
    pub inside_half_ball: Vec<bool>,
    pub failures: usize,
}

/// Follows the extremum `x₀` of the limit through a sequence of fields by
/// taking, in each, the nearest extremum of the same kind.
pub fn track_extremum(
    fields: &[GridField],
    mask: &SubdomainMask,
    x0: &[f64],
    kind: ExtremumKind,
    rho: f64,
) -> Result<TrackReport> {
    let mut points = Vec::new();
    let mut deviations = Vec::new();
    let mut inside = Vec::new();
    for f in fields {
        if f.components() != 1 {
            return Err(Error::DimensionMismatch("tracking needs scalar fields".into()));
        }
        let best = interior_extrema(f, mask)
            .into_iter()
            .filter(|e| e.kind.matches(kind))
            .map(|e| {
                let d = crate::grid::dist(&e.point, x0);
                (d, e.point)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((d, p)) => {
                inside.push(d < rho / 2.0);
                deviations.push(Some(d));
                points.push(Some(p));
            }
            None => {
                inside.push(false);
                deviations.push(None);
                points.push(None);
            }
        }
    }
    let failures = points.iter().filter(|p| p.is_none()).count();
    let max_deviation = deviations.iter().flatten().copied().reduce(f64::max);
    Ok(TrackReport { points, deviations, max_deviation, inside_half_ball: inside, failures })
}

/// A nonnegative piecewise-affine Lipschitz function that vanishes outside a
/// box: `max(0, min(L·d(x), c + max_j (a_j·x + b_j)))`, with `d` the signed
/// distance to the box boundary in the max-norm sense.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiecewiseAffine {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub slope: f64,
    pub offset: f64,
    pub planes: Vec<(Vec<f64>, f64)>,
}

impl PiecewiseAffine {
    /// Random instance with `planes` tilted planes, gradients up to `slope`.
    pub fn random(lower: Vec<f64>, upper: Vec<f64>, slope: f64, planes: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::seed::stream_rng(seed, 0);
        let n = lower.len();
        let planes = (0..planes.max(1))
            .map(|_| {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-slope..slope) / (n as f64).sqrt()).collect();
                let b = rng.random_range(-0.5..0.5);
                (a, b)
            })
            .collect();
        Self { lower, upper, slope, offset: rng.random_range(0.05..0.3), planes }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let d = x
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&xi, (&lo, &hi))| (xi - lo).min(hi - xi))
            .fold(f64::INFINITY, f64::min);
        let top = self
            .planes
            .iter()
            .map(|(a, b)| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b)
            .fold(f64::NEG_INFINITY, f64::max);
        (self.slope * d).min(self.offset + top).max(0.0)
    }
}
