//! Uniform rectangular grids, compactly contained subdomain masks, sampled
//! vector fields with finite-difference derivatives, and discrete extremum
//! detection.

mod io;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use io::{fmt17, read_csv, read_with_header, write_csv, write_with_header, FieldHeader};

/// Closure returning the analytic gradient `Du(x)` as an `N×n` matrix.
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;
/// Closure returning the analytic Hessian `D²u_α(x)` of component `α`.
pub type HessianFn = Arc<dyn Fn(&[f64], usize) -> Mat + Send + Sync>;

/// A uniform rectangular grid over the box `[lower, upper]`.
///
/// Linear indices run with axis 0 fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    h: f64,
    counts: Vec<usize>,
}

impl GridDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, h: f64) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidInput(
                "grid corners must be non-empty and of equal dimension".into(),
            ));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
        }
        let mut counts = Vec::with_capacity(lower.len());
        for (axis, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidInput(format!(
                    "axis {axis}: upper corner must exceed lower corner"
                )));
            }
            let cells = (hi - lo) / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * rounded.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "axis {axis}: extent {} is not a multiple of h = {h}",
                    hi - lo
                )));
            }
            let count = rounded as usize + 1;
            if count < 3 {
                return Err(Error::InvalidInput(format!(
                    "axis {axis}: need at least 3 points, got {count}"
                )));
            }
            counts.push(count);
        }
        Ok(Self { lower, upper, h, counts })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, h: f64, dim: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], h)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one cell, `hⁿ`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.counts
            .iter()
            .map(|&c| {
                let m = idx % c;
                idx /= c;
                m
            })
            .collect()
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (&m, &c) in multi.iter().zip(&self.counts) {
            idx += m * stride;
            stride *= c;
        }
        idx
    }

    /// Coordinates of grid point `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .zip(&self.lower)
            .map(|(&m, &lo)| lo + m as f64 * self.h)
            .collect()
    }

    /// The grid point displaced by `offset` cells, if it exists.
    pub fn offset(&self, idx: usize, offset: &[isize]) -> Option<usize> {
        let mut multi = self.multi_index(idx);
        for ((m, &o), &c) in multi.iter_mut().zip(offset).zip(&self.counts) {
            let shifted = *m as isize + o;
            if shifted < 0 || shifted >= c as isize {
                return None;
            }
            *m = shifted as usize;
        }
        Some(self.index_of(&multi))
    }

    /// One step of `step` cells along `axis`.
    pub fn neighbor(&self, idx: usize, axis: usize, step: isize) -> Option<usize> {
        let mut o = vec![0isize; self.dim()];
        o[axis] = step;
        self.offset(idx, &o)
    }

    /// Nearest grid point to `x`, or `None` when `x` lies outside the box.
    pub fn nearest_index(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(x.len());
        for ((&xi, &lo), &c) in x.iter().zip(&self.lower).zip(&self.counts) {
            let m = ((xi - lo) / self.h).round();
            if m < 0.0 || m > (c - 1) as f64 {
                return None;
            }
            multi.push(m as usize);
        }
        Some(self.index_of(&multi))
    }

    /// Whether `idx` lies within `depth` cells of the outer edge of the grid.
    pub fn in_edge_layer(&self, idx: usize, depth: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.counts)
            .any(|(&m, &c)| m < depth || m + depth >= c)
    }

    /// All `3ⁿ − 1` nonzero offsets in `{−1, 0, 1}ⁿ`.
    pub fn neighborhood_offsets(&self) -> Vec<Vec<isize>> {
        let n = self.dim();
        let total = 3usize.pow(n as u32);
        (0..total)
            .map(|mut k| {
                (0..n)
                    .map(|_| {
                        let o = (k % 3) as isize - 1;
                        k /= 3;
                        o
                    })
                    .collect::<Vec<_>>()
            })
            .filter(|o| o.iter().any(|&v| v != 0))
            .collect()
    }

    /// Whether two grids describe the same lattice.
    pub fn same_lattice(&self, other: &GridDomain) -> bool {
        self.counts == other.counts
            && (self.h - other.h).abs() <= 1e-12 * self.h
            && self.lower.iter().zip(&other.lower).all(|(a, b)| (a - b).abs() <= 1e-12)
    }
}

/// A boolean selection of grid points standing for `Ω′ ⋐ Ω`.
///
/// No selected point lies within `depth` cells of the grid edge, so every
/// selected point has a full second-order stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct SubdomainMask {
    flags: Vec<bool>,
    depth: usize,
    label: String,
}

impl SubdomainMask {
    /// Points satisfying `pred` that are at least `depth` cells from the edge.
    pub fn from_predicate(
        domain: &GridDomain,
        depth: usize,
        label: impl Into<String>,
        pred: impl Fn(&[f64]) -> bool + Sync,
    ) -> Result<Self> {
        let depth = depth.max(1);
        let flags = (0..domain.len())
            .into_par_iter()
            .map(|idx| !domain.in_edge_layer(idx, depth) && pred(&domain.point(idx)))
            .collect();
        Ok(Self { flags, depth, label: label.into() })
    }

    /// Every point at least `depth` cells from the edge.
    pub fn interior(domain: &GridDomain, depth: usize) -> Self {
        let depth = depth.max(1);
        let flags = (0..domain.len()).map(|idx| !domain.in_edge_layer(idx, depth)).collect();
        Self { flags, depth, label: format!("interior(depth={depth})") }
    }

    /// Explicit flags; fails when a flagged point sits in the edge layer.
    pub fn from_flags(
        domain: &GridDomain,
        flags: Vec<bool>,
        depth: usize,
        label: impl Into<String>,
    ) -> Result<Self> {
        let depth = depth.max(1);
        if flags.len() != domain.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} flags for {} grid points",
                flags.len(),
                domain.len()
            )));
        }
        if let Some(idx) = (0..flags.len()).find(|&i| flags[i] && domain.in_edge_layer(i, depth)) {
            return Err(Error::Containment(format!(
                "masked point {:?} lies in the outer {depth}-cell layer",
                domain.point(idx)
            )));
        }
        Ok(Self { flags, depth, label: label.into() })
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.flags.get(idx).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn is_subset_of(&self, other: &SubdomainMask) -> bool {
        self.flags.len() == other.flags.len()
            && self.flags.iter().zip(&other.flags).all(|(&a, &b)| !a || b)
    }

    pub fn intersection(&self, other: &SubdomainMask) -> SubdomainMask {
        SubdomainMask {
            flags: self.flags.iter().zip(&other.flags).map(|(&a, &b)| a && b).collect(),
            depth: self.depth.max(other.depth),
            label: format!("{}∩{}", self.label, other.label),
        }
    }

    /// Unselected points that touch a selected point: the discrete `∂Ω′`.
    pub fn frontier(&self, domain: &GridDomain) -> Vec<usize> {
        let offsets = domain.neighborhood_offsets();
        (0..domain.len())
            .filter(|&idx| {
                !self.flags[idx]
                    && offsets
                        .iter()
                        .any(|o| domain.offset(idx, o).is_some_and(|j| self.flags[j]))
            })
            .collect()
    }

    /// Selected points whose whole `3ⁿ` neighbourhood is selected.
    ///
    /// Difference quotients at these points never read values from outside
    /// the mask.
    pub fn stencil_interior(&self, domain: &GridDomain) -> SubdomainMask {
        let offsets = domain.neighborhood_offsets();
        let flags = (0..domain.len())
            .map(|idx| {
                self.flags[idx]
                    && offsets
                        .iter()
                        .all(|o| domain.offset(idx, o).is_some_and(|j| self.flags[j]))
            })
            .collect();
        SubdomainMask { flags, depth: self.depth + 1, label: format!("stencil-interior({})", self.label) }
    }

    /// Euclidean distance from each selected point to the nearest unselected
    /// grid point; zero off the mask.
    pub fn distance_to_complement(&self, domain: &GridDomain) -> Vec<f64> {
        let frontier: Vec<Vec<f64>> = self.frontier(domain).into_iter().map(|i| domain.point(i)).collect();
        (0..domain.len())
            .into_par_iter()
            .map(|idx| {
                if !self.flags[idx] {
                    return 0.0;
                }
                let x = domain.point(idx);
                frontier
                    .iter()
                    .map(|y| dist(&x, y))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// Largest distance from a selected point to the complement.
    pub fn inradius(&self, domain: &GridDomain) -> f64 {
        self.distance_to_complement(domain).into_iter().fold(0.0, f64::max)
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A vector-valued map sampled on a [`GridDomain`], optionally carrying
/// analytic derivative closures.
#[derive(Clone)]
pub struct GridField {
    domain: GridDomain,
    components: usize,
    values: Vec<f64>,
    gradient_fn: Option<GradientFn>,
    hessian_fn: Option<HessianFn>,
    use_analytic: bool,
}

impl std::fmt::Debug for GridField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridField")
            .field("domain", &self.domain)
            .field("components", &self.components)
            .field("analytic_gradient", &self.gradient_fn.is_some())
            .field("analytic_hessian", &self.hessian_fn.is_some())
            .field("use_analytic", &self.use_analytic)
            .finish()
    }
}

impl GridField {
    /// Wraps point-major values (`values[idx·N + α]`).
    pub fn from_values(domain: GridDomain, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 {
            return Err(Error::InvalidInput("field needs at least one component".into()));
        }
        if values.len() != domain.len() * components {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} points × {components} components",
                values.len(),
                domain.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value {v}")));
        }
        Ok(Self { domain, components, values, gradient_fn: None, hessian_fn: None, use_analytic: false })
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(
        domain: GridDomain,
        components: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Sync,
    ) -> Result<Self> {
        let values: Vec<f64> = (0..domain.len())
            .into_par_iter()
            .flat_map_iter(|idx| {
                let v = f(&domain.point(idx));
                debug_assert_eq!(v.len(), components);
                v.into_iter()
            })
            .collect();
        Self::from_values(domain, components, values)
    }

    pub fn scalar_from_fn(domain: GridDomain, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        Self::from_fn(domain, 1, |x| vec![f(x)])
    }

    /// Attaches an analytic gradient and switches derivative queries to it.
    pub fn with_gradient(mut self, g: GradientFn) -> Self {
        self.gradient_fn = Some(g);
        self.use_analytic = true;
        self
    }

    pub fn with_hessian(mut self, h: HessianFn) -> Self {
        self.hessian_fn = Some(h);
        self
    }

    /// Chooses between the analytic closures (when present) and finite
    /// differences.
    pub fn use_analytic(mut self, flag: bool) -> Self {
        self.use_analytic = flag;
        self
    }

    pub fn uses_analytic(&self) -> bool {
        self.use_analytic
    }

    pub fn gradient_fn(&self) -> Option<&GradientFn> {
        self.gradient_fn.as_ref()
    }

    pub fn hessian_fn(&self) -> Option<&HessianFn> {
        self.hessian_fn.as_ref()
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, idx: usize, alpha: usize) -> f64 {
        self.values[idx * self.components + alpha]
    }

    pub fn values_at(&self, idx: usize) -> &[f64] {
        let n = self.components;
        &self.values[idx * n..(idx + 1) * n]
    }

    /// `Du` at grid point `idx`: the analytic closure when enabled, central
    /// differences otherwise.
    pub fn gradient(&self, idx: usize) -> Result<Mat> {
        match (&self.gradient_fn, self.use_analytic) {
            (Some(g), true) => Ok(g(&self.domain.point(idx))),
            _ => self.fd_gradient(idx),
        }
    }

    /// Central-difference gradient, column `i = (u(x+heᵢ) − u(x−heᵢ)) / 2h`.
    pub fn fd_gradient(&self, idx: usize) -> Result<Mat> {
        let n = self.domain.dim();
        let h2 = 2.0 * self.domain.h;
        let mut grad = Mat::zeros(self.components, n);
        for i in 0..n {
            let (plus, minus) = self.axis_pair(idx, i)?;
            for a in 0..self.components {
                grad[(a, i)] = (self.value(plus, a) - self.value(minus, a)) / h2;
            }
        }
        Ok(grad)
    }

    /// `D²u_α` at grid point `idx`.
    pub fn hessian(&self, alpha: usize, idx: usize) -> Result<Mat> {
        match (&self.hessian_fn, self.use_analytic) {
            (Some(hf), true) => Ok(hf(&self.domain.point(idx), alpha)),
            _ => self.fd_hessian(alpha, idx),
        }
    }

    /// Second-order central Hessian stencil; mixed terms use the four
    /// diagonal neighbours and are symmetric by construction.
    pub fn fd_hessian(&self, alpha: usize, idx: usize) -> Result<Mat> {
        let n = self.domain.dim();
        let h = self.domain.h;
        let mut hess = Mat::zeros(n, n);
        let centre = self.value(idx, alpha);
        for i in 0..n {
            let (plus, minus) = self.axis_pair(idx, i)?;
            hess[(i, i)] = (self.value(plus, alpha) - 2.0 * centre + self.value(minus, alpha)) / (h * h);
            for j in (i + 1)..n {
                let corner = |si: isize, sj: isize| -> Result<f64> {
                    let mut o = vec![0isize; n];
                    o[i] = si;
                    o[j] = sj;
                    self.domain
                        .offset(idx, &o)
                        .map(|k| self.value(k, alpha))
                        .ok_or_else(|| Error::OutOfStencil {
                            index: idx,
                            detail: format!("missing diagonal neighbour on axes ({i},{j})"),
                        })
                };
                let mixed = (corner(1, 1)? - corner(1, -1)? - corner(-1, 1)? + corner(-1, -1)?) / (4.0 * h * h);
                hess[(i, j)] = mixed;
                hess[(j, i)] = mixed;
            }
        }
        Ok(hess)
    }

    fn axis_pair(&self, idx: usize, axis: usize) -> Result<(usize, usize)> {
        match (self.domain.neighbor(idx, axis, 1), self.domain.neighbor(idx, axis, -1)) {
            (Some(p), Some(m)) => Ok((p, m)),
            _ => Err(Error::OutOfStencil {
                index: idx,
                detail: format!("point {:?} has no neighbour pair on axis {axis}", self.domain.point(idx)),
            }),
        }
    }

    /// The scalar field `ξ·u`, carrying composed closures when present.
    pub fn project(&self, xi: &[f64]) -> Result<GridField> {
        if xi.len() != self.components {
            return Err(Error::DimensionMismatch(format!(
                "direction of length {} for a field with {} components",
                xi.len(),
                self.components
            )));
        }
        let values = (0..self.domain.len())
            .map(|idx| self.values_at(idx).iter().zip(xi).map(|(u, x)| u * x).sum())
            .collect();
        let mut out = GridField::from_values(self.domain.clone(), 1, values)?;
        if let Some(g) = &self.gradient_fn {
            let g = g.clone();
            let xi_owned = xi.to_vec();
            out.gradient_fn = Some(Arc::new(move |x| {
                let du = g(x);
                Mat::from_fn(1, du.ncols(), |_, i| (0..du.nrows()).map(|a| xi_owned[a] * du[(a, i)]).sum())
            }));
        }
        if let Some(hf) = &self.hessian_fn {
            let hf = hf.clone();
            let xi_owned = xi.to_vec();
            out.hessian_fn = Some(Arc::new(move |x, _| {
                let mut acc: Option<Mat> = None;
                for (a, &w) in xi_owned.iter().enumerate() {
                    let term = hf(x, a) * w;
                    acc = Some(match acc {
                        Some(m) => m + term,
                        None => term,
                    });
                }
                acc.expect("field has at least one component")
            }));
        }
        out.use_analytic = self.use_analytic;
        Ok(out)
    }

    /// Replaces the sampled values, dropping any analytic closures.
    pub fn with_values(&self, values: Vec<f64>) -> Result<GridField> {
        GridField::from_values(self.domain.clone(), self.components, values)
    }
}

/// Discrete essential supremum: the maximum over the given samples.
pub fn ess_sup(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut best: Option<f64> = None;
    for v in values {
        if v.is_nan() {
            return Err(Error::InvalidInput("NaN sample in ess sup".into()));
        }
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    best.ok_or_else(|| Error::InvalidInput("ess sup over an empty mask".into()))
}

/// Maximum of `f` over the mask, paired with the lowest index attaining it.
pub fn ess_sup_by(
    mask: &SubdomainMask,
    f: impl Fn(usize) -> Result<f64> + Sync,
) -> Result<(f64, usize)> {
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::InvalidInput("ess sup over an empty mask".into()));
    }
    let vals: Vec<f64> = idx.par_iter().map(|&i| f(i)).collect::<Result<_>>()?;
    let mut best = (vals[0], idx[0]);
    for (&v, &i) in vals.iter().zip(&idx) {
        if v.is_nan() {
            return Err(Error::InvalidInput(format!("NaN integrand at grid point {i}")));
        }
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// The grid points of the closed ball `‖x − x₀‖ ≤ ρ`, required to sit inside
/// `parent` together with one layer of neighbours (encoding `B ⋐ Ω′`).
pub fn ball_mask(
    domain: &GridDomain,
    parent: &SubdomainMask,
    center: &[f64],
    rho: f64,
) -> Result<SubdomainMask> {
    if center.len() != domain.dim() {
        return Err(Error::DimensionMismatch("ball centre dimension".into()));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("ball radius must be ≥ 0, got {rho}")));
    }
    let h = domain.h();
    let slack = 1e-9 * h;
    let mut lo = Vec::with_capacity(domain.dim());
    let mut hi = Vec::with_capacity(domain.dim());
    for axis in 0..domain.dim() {
        let a = ((center[axis] - rho - domain.lower[axis]) / h - 1e-9).ceil();
        let b = ((center[axis] + rho - domain.lower[axis]) / h + 1e-9).floor();
        if a < 0.0 || b > (domain.counts[axis] - 1) as f64 {
            return Err(Error::Containment(format!(
                "ball of radius {rho} at {center:?} leaves the grid"
            )));
        }
        lo.push(a as usize);
        hi.push(b as usize);
    }
    let mut flags = vec![false; domain.len()];
    let offsets = domain.neighborhood_offsets();
    let mut any = false;
    let mut failure = None;
    for_each_in_box(&lo, &hi, |multi| {
        if failure.is_some() {
            return;
        }
        let idx = domain.index_of(multi);
        if dist(&domain.point(idx), center) > rho + slack {
            return;
        }
        let inside = parent.contains(idx)
            && offsets.iter().all(|o| domain.offset(idx, o).is_some_and(|j| parent.contains(j)));
        if !inside {
            failure = Some(idx);
            return;
        }
        flags[idx] = true;
        any = true;
    });
    if let Some(idx) = failure {
        return Err(Error::Containment(format!(
            "ball of radius {rho} at {center:?} is not compactly inside `{}` (point {:?})",
            parent.label(),
            domain.point(idx)
        )));
    }
    if !any {
        return Err(Error::InvalidInput(format!(
            "ball of radius {rho} at {center:?} contains no grid point"
        )));
    }
    Ok(SubdomainMask {
        flags,
        depth: parent.depth,
        label: format!("ball(center={center:?}, rho={rho})"),
    })
}

pub(crate) fn for_each_in_box(lo: &[usize], hi: &[usize], mut f: impl FnMut(&[usize])) {
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return;
    }
    let mut cur = lo.to_vec();
    loop {
        f(&cur);
        let mut axis = 0;
        loop {
            if axis == cur.len() {
                return;
            }
            if cur[axis] < hi[axis] {
                cur[axis] += 1;
                break;
            }
            cur[axis] = lo[axis];
            axis += 1;
        }
    }
}

/// Whether a discrete extremum is a maximum, a minimum, or both (a plateau
/// that fills the whole grid).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtremumKind {
    Max,
    Min,
    Both,
}

impl ExtremumKind {
    pub fn matches(self, other: ExtremumKind) -> bool {
        self == other || self == ExtremumKind::Both || other == ExtremumKind::Both
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub index: usize,
    pub point: Vec<f64>,
    pub kind: ExtremumKind,
    pub value: f64,
}

/// Local extrema of a scalar field inside `mask`.
///
/// A point counts when its value is `≥` (or `≤`) all `3ⁿ − 1` neighbours.
/// Equal-valued neighbours are grouped into plateaus; a plateau whose outer
/// neighbours are all strictly smaller (larger) is one maximum (minimum),
/// represented by its masked point nearest the plateau barycentre. Plateaus
/// that spill outside the mask are only reported when no other extremum
/// exists, which covers the identically-vanishing field.
pub fn interior_extrema(phi: &GridField, mask: &SubdomainMask) -> Vec<Extremum> {
    let domain = phi.domain();
    let offsets = domain.neighborhood_offsets();
    let value = |i: usize| phi.value(i, 0);

    let mut visited = vec![false; domain.len()];
    let mut interior = Vec::new();
    let mut spilling = Vec::new();

    for start in mask.indices() {
        if visited[start] {
            continue;
        }
        let v = value(start);
        let (mut ge, mut le) = (true, true);
        for o in &offsets {
            if let Some(j) = domain.offset(start, o) {
                let w = value(j);
                ge &= v >= w;
                le &= v <= w;
            }
        }
        if !ge && !le {
            continue;
        }
        // Flood the equal-valued plateau containing `start`.
        let mut stack = vec![start];
        let mut members = Vec::new();
        visited[start] = true;
        let (mut smaller, mut larger, mut spills) = (false, false, false);
        while let Some(i) = stack.pop() {
            members.push(i);
            spills |= !mask.contains(i);
            for o in &offsets {
                let Some(j) = domain.offset(i, o) else { continue };
                let w = value(j);
                if w == v {
                    if !visited[j] {
                        visited[j] = true;
                        stack.push(j);
                    }
                } else if w < v {
                    smaller = true;
                } else {
                    larger = true;
                }
            }
        }
        let kind = match (smaller, larger) {
            (false, false) => ExtremumKind::Both,
            (true, false) => ExtremumKind::Max,
            (false, true) => ExtremumKind::Min,
            (true, true) => continue,
        };
        let Some(rep) = plateau_representative(domain, mask, &members) else { continue };
        let ext = Extremum { index: rep, point: domain.point(rep), kind, value: v };
        if spills {
            spilling.push(ext);
        } else {
            interior.push(ext);
        }
    }

    let mut out = if interior.is_empty() { spilling } else { interior };
    out.sort_by_key(|e| e.index);
    out
}

fn plateau_representative(domain: &GridDomain, mask: &SubdomainMask, members: &[usize]) -> Option<usize> {
    let inside: Vec<usize> = members.iter().copied().filter(|&i| mask.contains(i)).collect();
    if inside.is_empty() {
        return None;
    }
    let n = domain.dim();
    let mut bary = vec![0.0; n];
    for &i in &inside {
        for (b, x) in bary.iter_mut().zip(domain.point(i)) {
            *b += x;
        }
    }
    bary.iter_mut().for_each(|b| *b /= inside.len() as f64);
    inside
        .iter()
        .copied()
        .min_by(|&a, &b| {
            dist(&domain.point(a), &bary)
                .total_cmp(&dist(&domain.point(b), &bary))
                .then(a.cmp(&b))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn unit_square(h: f64) -> GridDomain {
        GridDomain::cube(0.0, 1.0, h, 2).unwrap()
    }

    #[test]
    fn domain_construction() {
        let d = unit_square(0.1);
        assert_eq!(d.counts(), &[11, 11]);
        assert_eq!(d.len(), 121);
        let p = d.point(d.index_of(&[3, 7]));
        assert_abs_diff_eq!(p[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.7, epsilon = 1e-15);
        assert!(GridDomain::new(vec![0.0], vec![1.0], 0.3).is_err());
        assert!(GridDomain::new(vec![0.0], vec![1.0], 1.0).is_err());
        assert!(GridDomain::new(vec![1.0], vec![0.0], 0.1).is_err());
        assert_eq!(d.neighborhood_offsets().len(), 8);
    }

    #[test]
    fn gradient_exact_on_affine() {
        let d = GridDomain::cube(-1.0, 1.0, 0.05, 3).unwrap();
        let a = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.5]);
        let b = [0.3, -0.7];
        let f = GridField::from_fn(d.clone(), 2, |x| {
            (0..2).map(|r| b[r] + (0..3).map(|c| a[(r, c)] * x[c]).sum::<f64>()).collect()
        })
        .unwrap();
        for idx in SubdomainMask::interior(&d, 1).indices().into_iter().step_by(97) {
            let g = f.gradient(idx).unwrap();
            assert_abs_diff_eq!(g, a, epsilon = 1e-12);
            for alpha in 0..2 {
                assert_abs_diff_eq!(f.hessian(alpha, idx).unwrap(), Mat::zeros(3, 3), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gradient_of_squared_norm_at_origin() {
        let d = GridDomain::cube(-1.0, 1.0, 0.1, 2).unwrap();
        let f = GridField::scalar_from_fn(d.clone(), |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        let origin = d.nearest_index(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(f.gradient(origin).unwrap(), Mat::zeros(1, 2), epsilon = 1e-14);
    }

    #[test]
    fn gradient_of_sine() {
        let d = GridDomain::cube(0.0, 1.0, 0.01, 2).unwrap();
        let f = GridField::scalar_from_fn(d.clone(), |x| x[0].sin()).unwrap();
        let idx = d.nearest_index(&[0.3, 0.3]).unwrap();
        assert!((f.gradient(idx).unwrap()[(0, 0)] - 0.3f64.cos()).abs() < 1e-4);
    }

    #[test]
    fn hessian_exact_on_quadratic() {
        let d = GridDomain::cube(-1.0, 1.0, 0.1, 3).unwrap();
        let q = Mat::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 1.0, 0.25, -1.0, 0.25, -3.0]);
        let f = GridField::scalar_from_fn(d.clone(), |x| {
            0.5 * (0..3).map(|i| (0..3).map(|j| x[i] * q[(i, j)] * x[j]).sum::<f64>()).sum::<f64>()
        })
        .unwrap();
        for idx in SubdomainMask::interior(&d, 1).indices().into_iter().step_by(53) {
            assert_abs_diff_eq!(f.hessian(0, idx).unwrap(), q, epsilon = 1e-10);
        }
    }

    #[test]
    fn hessian_mixed_term_of_sine_product() {
        let d = GridDomain::cube(0.0, 1.0, 0.01, 2).unwrap();
        let f = GridField::scalar_from_fn(d.clone(), |x| x[0].sin() * x[1].sin()).unwrap();
        let idx = d.nearest_index(&[0.5, 0.5]).unwrap();
        let hess = f.hessian(0, idx).unwrap();
        assert!((hess[(0, 1)] - 0.5f64.cos().powi(2)).abs() < 1e-4);
        assert_eq!(hess[(0, 1)], hess[(1, 0)]);
    }

    #[test]
    fn stencil_errors_at_edge() {
        let d = unit_square(0.1);
        let f = GridField::scalar_from_fn(d.clone(), |x| x[0]).unwrap();
        assert!(matches!(f.gradient(0), Err(Error::OutOfStencil { .. })));
        assert!(matches!(f.hessian(0, 5), Err(Error::OutOfStencil { .. })));
    }

    #[test]
    fn gradient_converges_at_second_order() {
        let errs: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&h| {
                let d = GridDomain::cube(0.0, 1.0, h, 2).unwrap();
                let f = GridField::scalar_from_fn(d.clone(), |x| (2.0 * x[0]).sin() * x[1].exp()).unwrap();
                let idx = d.nearest_index(&[0.4, 0.6]).unwrap();
                let x = d.point(idx);
                let g = f.gradient(idx).unwrap();
                let ex = [2.0 * (2.0 * x[0]).cos() * x[1].exp(), (2.0 * x[0]).sin() * x[1].exp()];
                ((g[(0, 0)] - ex[0]).powi(2) + (g[(0, 1)] - ex[1]).powi(2)).sqrt()
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.9, "{errs:?}");
        }
    }

    #[test]
    fn ess_sup_examples() {
        assert_eq!(ess_sup([0.0, 1.0, 0.5]).unwrap(), 1.0);
        assert_eq!(ess_sup(std::iter::repeat_n(2.5, 10)).unwrap(), 2.5);
        assert!(ess_sup(std::iter::empty()).is_err());
        assert!(ess_sup([1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ess_sup_monotone_under_inclusion() {
        let d = unit_square(0.05);
        let f = GridField::scalar_from_fn(d.clone(), |x| (5.0 * x[0]).sin() + x[1] * x[1]).unwrap();
        let big = SubdomainMask::interior(&d, 1);
        let small = SubdomainMask::from_predicate(&d, 1, "disc", |x| (x[0] - 0.4).hypot(x[1] - 0.5) < 0.3).unwrap();
        assert!(small.is_subset_of(&big));
        let s_big = ess_sup_by(&big, |i| Ok(f.value(i, 0))).unwrap().0;
        let s_small = ess_sup_by(&small, |i| Ok(f.value(i, 0))).unwrap().0;
        assert!(s_small <= s_big);
    }

    #[test]
    fn ball_mask_examples() {
        let d = unit_square(0.05);
        let parent = SubdomainMask::interior(&d, 1);
        let single = ball_mask(&d, &parent, &[0.5, 0.5], 0.02).unwrap();
        assert_eq!(single.count(), 1);
        assert!(matches!(ball_mask(&d, &parent, &[0.5, 0.5], 0.5), Err(Error::Containment(_))));
        assert!(matches!(ball_mask(&d, &parent, &[0.1, 0.5], 0.1), Err(Error::Containment(_))));

        // Lattice points in a disc of radius 0.25 at spacing 0.05: about πρ²/h².
        let disc = ball_mask(&d, &parent, &[0.5, 0.5], 0.25).unwrap();
        let expected = PI * 0.25f64.powi(2) / 0.05f64.powi(2);
        let brute = (0..d.len()).filter(|&i| dist(&d.point(i), &[0.5, 0.5]) <= 0.25 + 1e-12).count();
        assert_eq!(disc.count(), brute);
        assert!((disc.count() as f64 - expected).abs() <= 0.05 * expected);
    }

    #[test]
    fn single_bump_has_one_max() {
        let d = unit_square(0.02);
        let mask = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), |x| (1.0 - dist(x, &[0.5, 0.5]) / 0.3).max(0.0)).unwrap();
        let ext = interior_extrema(&phi, &mask);
        assert_eq!(ext.len(), 1);
        assert_eq!(ext[0].kind, ExtremumKind::Max);
        assert_abs_diff_eq!(ext[0].point[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ext[0].point[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_field_yields_one_plateau_representative() {
        let d = unit_square(0.1);
        let mask = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), |_| 0.0).unwrap();
        let ext = interior_extrema(&phi, &mask);
        assert_eq!(ext.len(), 1);
        assert_eq!(ext[0].kind, ExtremumKind::Both);
        assert!(mask.contains(ext[0].index));
        assert_abs_diff_eq!(ext[0].point[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sine_product_has_four_extrema() {
        let d = unit_square(0.02);
        let mask = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin()).unwrap();
        let ext = interior_extrema(&phi, &mask);
        assert_eq!(ext.len(), 4, "{ext:?}");
        for (target, kind) in [
            ([0.25, 0.25], ExtremumKind::Max),
            ([0.25, 0.75], ExtremumKind::Min),
            ([0.75, 0.25], ExtremumKind::Min),
            ([0.75, 0.75], ExtremumKind::Max),
        ] {
            let hit = ext.iter().find(|e| dist(&e.point, &target) <= 0.02).expect("extremum near target");
            assert_eq!(hit.kind, kind);
        }
    }

    #[test]
    fn compactly_supported_fields_have_extrema() {
        use rand::{Rng, SeedableRng};
        let d = unit_square(0.05);
        let mask = SubdomainMask::interior(&d, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
            let amp: f64 = rng.random_range(-2.0..2.0);
            let r = rng.random_range(0.1..0.25);
            let phi = GridField::scalar_from_fn(d.clone(), |x| amp * (1.0 - dist(x, &c) / r).max(0.0)).unwrap();
            assert!(!interior_extrema(&phi, &mask).is_empty());
        }
    }

    #[test]
    fn mask_geometry() {
        let d = unit_square(0.1);
        let mask = SubdomainMask::interior(&d, 1);
        let dist = mask.distance_to_complement(&d);
        let idx = d.index_of(&[3, 5]);
        assert_abs_diff_eq!(dist[idx], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(mask.inradius(&d), 0.5, epsilon = 1e-12);
        assert_eq!(mask.frontier(&d).len(), 40);
        let core = mask.stencil_interior(&d);
        assert_eq!(core.count(), 49);
        assert!(SubdomainMask::from_flags(&d, vec![true; d.len()], 1, "all").is_err());
    }
}
