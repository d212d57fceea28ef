//! Residuals of the Hamilton-Jacobi equation and of the ∞-Laplace operators,
//! plus bumps and rank-one variations.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDomain, GridField, SubdomainMask};
use crate::hamiltonian::Hamiltonian;
use crate::tensor::{default_rank_tol, frobenius, range_perp_projection, smallest_retained_singular_value, Mat};

/// `Du` and the component Hessians `D²u_α` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivatives {
    pub grad: Mat,
    pub hess: Vec<Mat>,
}

impl Derivatives {
    /// Derivatives of `u` at grid point `idx`, analytic when enabled.
    pub fn at(u: &GridField, idx: usize) -> Result<Self> {
        let grad = u.gradient(idx)?;
        let hess = (0..u.components()).map(|a| u.hessian(a, idx)).collect::<Result<_>>()?;
        Ok(Self { grad, hess })
    }

    /// Finite-difference derivatives at `idx`, whatever closures are attached.
    pub fn fd_at(u: &GridField, idx: usize) -> Result<Self> {
        let grad = u.fd_gradient(idx)?;
        let hess = (0..u.components()).map(|a| u.fd_hessian(a, idx)).collect::<Result<_>>()?;
        Ok(Self { grad, hess })
    }

    /// Derivatives from the analytic closures at an arbitrary point.
    pub fn analytic(u: &GridField, x: &[f64]) -> Result<Self> {
        match (u.gradient_fn(), u.hessian_fn()) {
            (Some(g), Some(h)) => Ok(Self { grad: g(x), hess: (0..u.components()).map(|a| h(x, a)).collect() }),
            _ => Err(Error::InvalidInput("field has no analytic gradient and Hessian".into())),
        }
    }

    fn components(&self) -> usize {
        self.grad.nrows()
    }

    fn dim(&self) -> usize {
        self.grad.ncols()
    }
}

/// `Du⊗Du : D²u` for a scalar field.
pub fn scalar_from(d: &Derivatives) -> Result<f64> {
    if d.components() != 1 {
        return Err(Error::DimensionMismatch("scalar ∞-Laplacian of a vector field".into()));
    }
    let n = d.dim();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += d.grad[(0, i)] * d.grad[(0, j)] * d.hess[0][(i, j)];
        }
    }
    Ok(s)
}

/// The index form `Σ (Dᵢu_α Dⱼu_β + |Du|² [Du]⊥_{αβ} δᵢⱼ) D²ᵢⱼ u_β`.
pub fn system_from(d: &Derivatives, rank_tol: Option<f64>) -> Result<Vec<f64>> {
    let (nc, n) = (d.components(), d.dim());
    let perp = range_perp_projection(&d.grad, rank_tol)?;
    let g2 = d.grad.norm_squared();
    let mut out = vec![0.0; nc];
    for (alpha, o) in out.iter_mut().enumerate() {
        for beta in 0..nc {
            for i in 0..n {
                for j in 0..n {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    let coeff = d.grad[(alpha, i)] * d.grad[(beta, j)] + g2 * perp[(alpha, beta)] * delta;
                    *o += coeff * d.hess[beta][(i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// `Du⊗Du : D²u`, component `α = Σ Dᵢu_α Dⱼu_β D²ᵢⱼu_β`.
pub fn tangential_from(d: &Derivatives) -> Vec<f64> {
    let (nc, n) = (d.components(), d.dim());
    (0..nc)
        .map(|alpha| {
            let mut s = 0.0;
            for beta in 0..nc {
                for i in 0..n {
                    for j in 0..n {
                        s += d.grad[(alpha, i)] * d.grad[(beta, j)] * d.hess[beta][(i, j)];
                    }
                }
            }
            s
        })
        .collect()
}

/// `|Du|² [Du]⊥ Δu`.
pub fn normal_from(d: &Derivatives, rank_tol: Option<f64>) -> Result<Vec<f64>> {
    let perp = range_perp_projection(&d.grad, rank_tol)?;
    let g2 = d.grad.norm_squared();
    let lap: Vec<f64> = d.hess.iter().map(|h| h.trace()).collect();
    Ok((0..d.components())
        .map(|alpha| g2 * (0..d.components()).map(|beta| perp[(alpha, beta)] * lap[beta]).sum::<f64>())
        .collect())
}

pub fn infty_laplacian_scalar(u: &GridField, idx: usize) -> Result<f64> {
    scalar_from(&Derivatives::at(u, idx)?)
}

pub fn infty_laplacian_system(u: &GridField, idx: usize, rank_tol: Option<f64>) -> Result<Vec<f64>> {
    system_from(&Derivatives::at(u, idx)?, rank_tol)
}

pub fn tangential_residual(u: &GridField, idx: usize) -> Result<Vec<f64>> {
    Ok(tangential_from(&Derivatives::at(u, idx)?))
}

pub fn normal_residual(u: &GridField, idx: usize, rank_tol: Option<f64>) -> Result<Vec<f64>> {
    normal_from(&Derivatives::at(u, idx)?, rank_tol)
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sup-norm summary of a pointwise residual over a mask.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub sup: f64,
    pub worst_point: Vec<f64>,
    pub h: f64,
    pub points: usize,
    /// Points whose smallest retained singular value of `Du` is within a
    /// factor 10 of the rank threshold.
    pub near_rank_change: usize,
    /// `(grid index, residual)` for every masked point, in index order.
    #[serde(skip)]
    pub samples: Vec<(usize, f64)>,
}

fn near_rank_change(grad: &Mat, tol: Option<f64>) -> Result<bool> {
    let t = match tol {
        Some(t) => t,
        None => default_rank_tol(grad)?,
    };
    Ok(match smallest_retained_singular_value(grad, Some(t))? {
        Some(s) => s <= 10.0 * t,
        None => false,
    })
}

fn report(domain: &GridDomain, rows: Vec<(usize, f64, bool)>) -> Result<ResidualReport> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("residual over an empty mask".into()));
    }
    let (mut sup, mut worst) = (f64::NEG_INFINITY, rows[0].0);
    for &(i, v, _) in &rows {
        if v > sup {
            sup = v;
            worst = i;
        }
    }
    Ok(ResidualReport {
        sup,
        worst_point: domain.point(worst),
        h: domain.h(),
        points: rows.len(),
        near_rank_change: rows.iter().filter(|r| r.2).count(),
        samples: rows.into_iter().map(|(i, v, _)| (i, v)).collect(),
    })
}

/// `sup over the mask of |H(x, Du(x)) − c|`.
pub fn hj_residual(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask, c: f64) -> Result<ResidualReport> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!("level c must be finite and ≥ 0, got {c}")));
    }
    let domain = u.domain();
    let rows = mask
        .indices()
        .par_iter()
        .map(|&i| Ok((i, (h.eval(&domain.point(i), &u.gradient(i)?)? - c).abs(), false)))
        .collect::<Result<Vec<_>>>()?;
    report(domain, rows)
}

/// Which part of the ∞-Laplace system to measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualKind {
    System,
    Tangential,
    Normal,
}

/// Sup over the mask of the Euclidean norm of the chosen residual.
pub fn system_residual(
    u: &GridField,
    mask: &SubdomainMask,
    kind: ResidualKind,
    rank_tol: Option<f64>,
) -> Result<ResidualReport> {
    let domain = u.domain();
    let rows = mask
        .indices()
        .par_iter()
        .map(|&i| {
            let d = Derivatives::at(u, i)?;
            let r = match kind {
                ResidualKind::System => system_from(&d, rank_tol)?,
                ResidualKind::Tangential => tangential_from(&d),
                ResidualKind::Normal => normal_from(&d, rank_tol)?,
            };
            Ok((i, vec_norm(&r), near_rank_change(&d.grad, rank_tol)?))
        })
        .collect::<Result<Vec<_>>>()?;
    report(domain, rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// `q(s) = (1 − s²)³`, C² across the seam `s = 1`.
    #[default]
    Quintic,
    /// `q(s) = (1 + cos πs)/2`, only C¹ across the seam.
    Cosine,
}

/// A radial bump `φ(x) = sign · a · q(|x − x₀| / r)` supported in `B_r(x₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "plus_one")]
    pub sign: f64,
}

fn plus_one() -> f64 {
    1.0
}

impl BumpSpec {
    pub fn new(center: Vec<f64>, radius: f64, amplitude: f64) -> Self {
        Self { center, radius, amplitude, profile: Profile::Quintic, sign: 1.0 }
    }

    fn scale(&self) -> f64 {
        self.sign * self.amplitude
    }

    fn offset(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let y: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let rho = vec_norm(&y);
        (y, rho)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let (_, rho) = self.offset(x);
        let s = rho / self.radius;
        if s >= 1.0 {
            return 0.0;
        }
        self.scale()
            * match self.profile {
                Profile::Quintic => (1.0 - s * s).powi(3),
                Profile::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * s).cos()),
            }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (y, rho) = self.offset(x);
        let r = self.radius;
        if rho >= r {
            return vec![0.0; y.len()];
        }
        let a = self.scale();
        match self.profile {
            Profile::Quintic => {
                let w = 1.0 - rho * rho / (r * r);
                y.iter().map(|yi| -6.0 * a * w * w * yi / (r * r)).collect()
            }
            Profile::Cosine => {
                if rho == 0.0 {
                    return vec![0.0; y.len()];
                }
                let pi = std::f64::consts::PI;
                let fp = -0.5 * a * pi / r * (pi * rho / r).sin();
                y.iter().map(|yi| fp * yi / rho).collect()
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Mat {
        let (y, rho) = self.offset(x);
        let n = y.len();
        let r = self.radius;
        if rho >= r {
            return Mat::zeros(n, n);
        }
        let a = self.scale();
        match self.profile {
            Profile::Quintic => {
                let w = 1.0 - rho * rho / (r * r);
                Mat::from_fn(n, n, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    -6.0 * a * w * w * delta / (r * r) + 24.0 * a * w * y[i] * y[j] / r.powi(4)
                })
            }
            Profile::Cosine => {
                let pi = std::f64::consts::PI;
                let t = pi * rho / r;
                let fpp = -0.5 * a * pi * pi / (r * r) * t.cos();
                // f'(ρ)/ρ, with its limit at the centre.
                let fp_over_rho = if rho == 0.0 { fpp } else { -0.5 * a * pi / r * t.sin() / rho };
                Mat::from_fn(n, n, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    if rho == 0.0 {
                        fpp * delta
                    } else {
                        let (ui, uj) = (y[i] / rho, y[j] / rho);
                        fpp * ui * uj + fp_over_rho * (delta - ui * uj)
                    }
                })
            }
        }
    }

    /// `sup |Dφ|`, attained at `s = 1/√5` for the quintic profile and at
    /// `s = 1/2` for the cosine one.
    pub fn lipschitz(&self) -> f64 {
        let a = self.amplitude.abs();
        match self.profile {
            Profile::Quintic => 6.0 * a / self.radius * 16.0 / (25.0 * 5f64.sqrt()),
            Profile::Cosine => 0.5 * a * std::f64::consts::PI / self.radius,
        }
    }
}

/// Samples a bump on `domain` and attaches its analytic derivatives.
///
/// The closed support ball must stay at least one cell away from the grid
/// edge.
pub fn make_bump(spec: &BumpSpec, domain: &GridDomain) -> Result<GridField> {
    if spec.center.len() != domain.dim() {
        return Err(Error::DimensionMismatch("bump centre dimension".into()));
    }
    if !(spec.radius > 0.0 && spec.radius.is_finite()) || !spec.amplitude.is_finite() {
        return Err(Error::InvalidInput(format!("bad bump parameters {spec:?}")));
    }
    if spec.sign != 1.0 && spec.sign != -1.0 {
        return Err(Error::InvalidInput(format!("bump sign must be ±1, got {}", spec.sign)));
    }
    let h = domain.h();
    for axis in 0..domain.dim() {
        if spec.center[axis] - spec.radius < domain.lower()[axis] + h - 1e-12
            || spec.center[axis] + spec.radius > domain.upper()[axis] - h + 1e-12
        {
            return Err(Error::Containment(format!(
                "bump support B({:?}, {}) leaves the grid interior",
                spec.center, spec.radius
            )));
        }
    }
    let s = spec.clone();
    let field = GridField::scalar_from_fn(domain.clone(), |x| s.value(x))?;
    let (g, hs) = (spec.clone(), spec.clone());
    Ok(field
        .with_gradient(Arc::new(move |x| {
            let gr = g.gradient(x);
            Mat::from_row_slice(1, gr.len(), &gr)
        }))
        .with_hessian(Arc::new(move |x, _| hs.hessian(x))))
}

/// `u + ξφ`, with analytic closures `Du + ξ⊗Dφ` and `D²u_α + ξ_α D²φ`
/// whenever both inputs carry them.
pub fn rank_one_variation(u: &GridField, xi: &[f64], phi: &GridField) -> Result<GridField> {
    if xi.len() != u.components() {
        return Err(Error::DimensionMismatch(format!(
            "ξ has length {} for a field with {} components",
            xi.len(),
            u.components()
        )));
    }
    if phi.components() != 1 || !phi.domain().same_lattice(u.domain()) {
        return Err(Error::DimensionMismatch("φ must be scalar and share the grid of u".into()));
    }
    if phi.values().iter().all(|&v| v == 0.0) {
        return Ok(u.clone());
    }
    let nc = u.components();
    let values: Vec<f64> = (0..u.domain().len())
        .flat_map(|idx| {
            let p = phi.value(idx, 0);
            u.values_at(idx).iter().zip(xi).map(move |(v, x)| v + x * p).collect::<Vec<_>>()
        })
        .collect();
    let mut out = u.with_values(values)?;
    debug_assert_eq!(out.components(), nc);
    if let (Some(gu), Some(gp)) = (u.gradient_fn(), phi.gradient_fn()) {
        let (gu, gp, xi) = (gu.clone(), gp.clone(), xi.to_vec());
        out = out.with_gradient(Arc::new(move |x| {
            let mut g = gu(x);
            let dp = gp(x);
            for a in 0..g.nrows() {
                for i in 0..g.ncols() {
                    g[(a, i)] += xi[a] * dp[(0, i)];
                }
            }
            g
        }));
    }
    if let (Some(hu), Some(hp)) = (u.hessian_fn(), phi.hessian_fn()) {
        let (hu, hp, xi) = (hu.clone(), hp.clone(), xi.to_vec());
        out = out.with_hessian(Arc::new(move |x, a| hu(x, a) + hp(x, 0) * xi[a]));
    }
    Ok(out.use_analytic(u.uses_analytic() && phi.uses_analytic() && u.gradient_fn().is_some() && phi.gradient_fn().is_some()))
}

/// Largest finite-difference gradient norm over the mask.
pub fn fd_lipschitz(u: &GridField, mask: &SubdomainMask) -> Result<f64> {
    let vals = mask
        .indices()
        .par_iter()
        .map(|&i| Ok(frobenius(&u.fd_gradient(i)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}
