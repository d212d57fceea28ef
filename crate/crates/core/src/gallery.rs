//! Analytic fields with exact first and second derivatives.
//!
//! Complex-valued examples are realified as `(Re u, Im u)`; gradient rows are
//! components and columns are `∂/∂x₁, ∂/∂x₂, …`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GradientFn, GridDomain, GridField, HessianFn};
use crate::tensor::Mat;

pub type ValueFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type DistanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Every name accepted by [`get`].
pub const NAMES: [&str; 5] = ["affine", "cone", "complex-exp", "distance-to-set", "one-d-pair"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    Smooth,
    /// Lipschitz, smooth off a declared singular set.
    LipschitzSingular,
}

/// What is known about an entry in closed form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Facts {
    /// `c` with `|Du| = c` off the singular set, if constant.
    pub eikonal_level: Option<f64>,
    pub infinity_harmonic: bool,
    pub rank: Option<String>,
    pub singular_set: Option<String>,
}

#[derive(Clone)]
pub struct AnalyticField {
    pub name: String,
    pub components: usize,
    pub dim: usize,
    pub smoothness: Smoothness,
    pub facts: Facts,
    value: ValueFn,
    gradient: GradientFn,
    hessian: HessianFn,
    singular: DistanceFn,
}

impl std::fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticField")
            .field("name", &self.name)
            .field("components", &self.components)
            .field("dim", &self.dim)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

/// Serializable summary used by listings and reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GalleryEntry {
    pub name: String,
    pub components: usize,
    pub dim: usize,
    pub smoothness: Smoothness,
    pub facts: Facts,
}

impl AnalyticField {
    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        (self.value)(x)
    }

    /// Errors on the singular set.
    pub fn gradient(&self, x: &[f64]) -> Result<Mat> {
        self.check_regular(x)?;
        Ok((self.gradient)(x))
    }

    pub fn hessian(&self, x: &[f64], alpha: usize) -> Result<Mat> {
        self.check_regular(x)?;
        if alpha >= self.components {
            return Err(Error::InvalidInput(format!("component {alpha} out of range")));
        }
        Ok((self.hessian)(x, alpha))
    }

    /// Distance from `x` to the singular set (`∞` for smooth entries).
    pub fn singular_distance(&self, x: &[f64]) -> f64 {
        (self.singular)(x)
    }

    fn check_regular(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!("{} takes points in ℝ^{}", self.name, self.dim)));
        }
        if self.singular_distance(x) <= 1e-12 {
            return Err(Error::InvalidInput(format!("{} is not differentiable at {x:?}", self.name)));
        }
        Ok(())
    }

    /// Samples the field and attaches the analytic derivatives. At singular
    /// points the closures return a one-sided choice; masks should avoid them.
    pub fn sample(&self, domain: &GridDomain) -> Result<GridField> {
        if domain.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "{} lives in ℝ^{}, the grid in ℝ^{}",
                self.name,
                self.dim,
                domain.dim()
            )));
        }
        let v = self.value.clone();
        Ok(GridField::from_fn(domain.clone(), self.components, move |x| v(x))?
            .with_gradient(self.gradient.clone())
            .with_hessian(self.hessian.clone()))
    }

    pub fn entry(&self) -> GalleryEntry {
        GalleryEntry {
            name: self.name.clone(),
            components: self.components,
            dim: self.dim,
            smoothness: self.smoothness,
            facts: self.facts.clone(),
        }
    }
}

/// Catalog lookup with default parameters.
pub fn get(name: &str) -> Result<AnalyticField> {
    match name {
        "affine" => affine(Mat::from_row_slice(1, 2, &[0.6, 0.8]), vec![0.0]),
        "cone" => cone(2),
        "complex-exp" => Ok(complex_exp()),
        "distance-to-set" => distance_to_set(vec![vec![-0.5, 0.0], vec![0.5, 0.0]]),
        "one-d-pair" => Ok(one_d_pair()),
        other => Err(Error::UnknownName(other.to_string())),
    }
}

fn never_singular() -> DistanceFn {
    Arc::new(|_| f64::INFINITY)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `u(x) = Ax + b`.
pub fn affine(a: Mat, b: Vec<f64>) -> Result<AnalyticField> {
    if a.nrows() != b.len() || a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "A is {}×{} but b has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let (nc, n) = (a.nrows(), a.ncols());
    let sv = nalgebra::SVD::new(a.clone(), false, false).singular_values;
    let level = if nc == 1 { Some(a.norm()) } else { None };
    let (av, ag) = (a.clone(), a.clone());
    Ok(AnalyticField {
        name: "affine".into(),
        components: nc,
        dim: n,
        smoothness: Smoothness::Smooth,
        facts: Facts {
            eikonal_level: level,
            infinity_harmonic: true,
            rank: Some(format!("{} everywhere", sv.iter().filter(|&&s| s > 1e-12 * sv[0].max(1.0)).count())),
            singular_set: None,
        },
        value: Arc::new(move |x| (0..nc).map(|r| b[r] + (0..n).map(|i| av[(r, i)] * x[i]).sum::<f64>()).collect()),
        gradient: Arc::new(move |_| ag.clone()),
        hessian: Arc::new(move |_, _| Mat::zeros(n, n)),
        singular: never_singular(),
    })
}

/// `u(x) = ‖x‖`, singular at the origin.
pub fn cone(dim: usize) -> Result<AnalyticField> {
    if dim == 0 {
        return Err(Error::InvalidInput("cone needs dim ≥ 1".into()));
    }
    Ok(AnalyticField {
        name: "cone".into(),
        components: 1,
        dim,
        smoothness: Smoothness::LipschitzSingular,
        facts: Facts {
            eikonal_level: Some(1.0),
            infinity_harmonic: true,
            rank: Some("1 off the origin".into()),
            singular_set: Some("{0}".into()),
        },
        value: Arc::new(|x| vec![norm(x)]),
        gradient: Arc::new(move |x| {
            let r = norm(x);
            if r == 0.0 {
                return Mat::zeros(1, dim);
            }
            Mat::from_iterator(1, dim, x.iter().map(|v| v / r))
        }),
        hessian: Arc::new(move |x, _| {
            let r = norm(x);
            if r == 0.0 {
                return Mat::zeros(dim, dim);
            }
            Mat::from_fn(dim, dim, |i, j| ((i == j) as u8 as f64 - x[i] * x[j] / (r * r)) / r)
        }),
        singular: Arc::new(norm),
    })
}

/// `e^{ix} − e^{iy}` as `(cos x − cos y, sin x − sin y)`.
pub fn complex_exp() -> AnalyticField {
    AnalyticField {
        name: "complex-exp".into(),
        components: 2,
        dim: 2,
        smoothness: Smoothness::Smooth,
        facts: Facts {
            eikonal_level: None,
            infinity_harmonic: true,
            rank: Some("1 on the diagonal x = y, 2 elsewhere near the origin".into()),
            singular_set: None,
        },
        value: Arc::new(|x| vec![x[0].cos() - x[1].cos(), x[0].sin() - x[1].sin()]),
        gradient: Arc::new(|x| Mat::from_row_slice(2, 2, &[-x[0].sin(), x[1].sin(), x[0].cos(), -x[1].cos()])),
        hessian: Arc::new(|x, a| match a {
            0 => Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![-x[0].cos(), x[1].cos()])),
            _ => Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![-x[0].sin(), x[1].sin()])),
        }),
        singular: never_singular(),
    }
}

/// `u(x) = dist(x, E)` for a finite set `E`; singular on `E` and on the
/// set of points with two nearest elements.
pub fn distance_to_set(points: Vec<Vec<f64>>) -> Result<AnalyticField> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("E must be a nonempty set of points of one dimension".into()));
    }
    let pts = Arc::new(points);
    // (distance, offset x − e) to the nearest point of E.
    let nearest = {
        let pts = pts.clone();
        move |x: &[f64]| {
            pts.iter()
                .map(|e| {
                    let d: Vec<f64> = x.iter().zip(e).map(|(a, b)| a - b).collect();
                    (norm(&d), d)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("E is nonempty")
        }
    };
    let (nv, ng, nh) = (nearest.clone(), nearest.clone(), nearest.clone());
    let ps = pts.clone();
    Ok(AnalyticField {
        name: "distance-to-set".into(),
        components: 1,
        dim,
        smoothness: Smoothness::LipschitzSingular,
        facts: Facts {
            eikonal_level: Some(1.0),
            infinity_harmonic: true,
            rank: Some("1 off the singular set".into()),
            singular_set: Some("E and the points equidistant from two nearest elements of E".into()),
        },
        value: Arc::new(move |x| vec![nv(x).0]),
        gradient: Arc::new(move |x| {
            let (r, d) = ng(x);
            if r == 0.0 {
                return Mat::zeros(1, dim);
            }
            Mat::from_iterator(1, dim, d.iter().map(|v| v / r))
        }),
        hessian: Arc::new(move |x, _| {
            let (r, d) = nh(x);
            if r == 0.0 {
                return Mat::zeros(dim, dim);
            }
            Mat::from_fn(dim, dim, |i, j| ((i == j) as u8 as f64 - d[i] * d[j] / (r * r)) / r)
        }),
        singular: Arc::new(move |x| {
            let mut ds: Vec<(f64, &Vec<f64>)> = ps
                .iter()
                .map(|e| (norm(&x.iter().zip(e).map(|(a, b)| a - b).collect::<Vec<_>>()), e))
                .collect();
            ds.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut best = ds[0].0;
            // Distance to the bisector of the two nearest points.
            if ds.len() > 1 {
                let sep = norm(&ds[0].1.iter().zip(ds[1].1).map(|(a, b)| a - b).collect::<Vec<_>>());
                best = best.min((ds[1].0 * ds[1].0 - ds[0].0 * ds[0].0) / (2.0 * sep));
            }
            best
        }),
    })
}

/// The curve `t ↦ (t², t)` in ℝ².
pub fn one_d_pair() -> AnalyticField {
    AnalyticField {
        name: "one-d-pair".into(),
        components: 2,
        dim: 1,
        smoothness: Smoothness::Smooth,
        facts: Facts {
            eikonal_level: None,
            infinity_harmonic: false,
            rank: Some("1 everywhere".into()),
            singular_set: None,
        },
        value: Arc::new(|x| vec![x[0] * x[0], x[0]]),
        gradient: Arc::new(|x| Mat::from_row_slice(2, 1, &[2.0 * x[0], 1.0])),
        hessian: Arc::new(|_, a| Mat::from_element(1, 1, if a == 0 { 2.0 } else { 0.0 })),
        singular: never_singular(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{system_from, Derivatives};
    use crate::tensor::rank;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn catalog_lookup() {
        for n in NAMES {
            assert_eq!(get(n).unwrap().name, n);
        }
        assert!(matches!(get("saddle"), Err(Error::UnknownName(_))));
        let id = affine(Mat::identity(2, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(id.gradient(&[0.3, -2.0]).unwrap(), Mat::identity(2, 2));
        assert!(cone(2).unwrap().gradient(&[0.0, 0.0]).is_err());
        assert!(distance_to_set(vec![]).is_err());
    }

    #[test]
    fn complex_exp_rank_pattern() {
        let f = complex_exp();
        for t in [-0.7, 0.0, 0.7] {
            let g = f.gradient(&[t, t]).unwrap();
            assert_abs_diff_eq!(g.determinant(), 0.0, epsilon = 1e-15);
            assert_eq!(rank(&g, Some(1e-12)).unwrap(), 1);
        }
        let g = f.gradient(&[0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        assert_eq!(rank(&g, None).unwrap(), 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = f.gradient(&x).unwrap();
            assert_abs_diff_eq!(g.determinant(), (x[0] - x[1]).sin(), epsilon = 1e-14);
        }
    }

    fn fd_order(f: &AnalyticField, x: &[f64]) -> f64 {
        let err = |h: f64| {
            let g = f.gradient(x).unwrap();
            let mut e = 0.0f64;
            for i in 0..f.dim {
                let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                xp[i] += h;
                xm[i] -= h;
                let (vp, vm) = (f.value(&xp), f.value(&xm));
                for a in 0..f.components {
                    e = e.max(((vp[a] - vm[a]) / (2.0 * h) - g[(a, i)]).abs());
                }
            }
            e
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        if e1 < 1e-11 {
            return f64::INFINITY;
        }
        (e1 / e2).log2()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for n in NAMES {
            let f = get(n).unwrap();
            let mut tested = 0;
            while tested < 20 {
                let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if f.singular_distance(&x) < 0.1 {
                    continue;
                }
                assert!(fd_order(&f, &x) >= 1.9, "{n} at {x:?}");
                tested += 1;
            }
        }
    }

    #[test]
    fn hessians_match_gradient_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for n in NAMES {
            let f = get(n).unwrap();
            for _ in 0..20 {
                let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if f.singular_distance(&x) < 0.1 {
                    continue;
                }
                for a in 0..f.components {
                    let hs = f.hessian(&x, a).unwrap();
                    for j in 0..f.dim {
                        let (mut xp, mut xm) = (x.clone(), x.clone());
                        xp[j] += h;
                        xm[j] -= h;
                        let (gp, gm) = (f.gradient(&xp).unwrap(), f.gradient(&xm).unwrap());
                        for i in 0..f.dim {
                            assert_abs_diff_eq!(hs[(i, j)], (gp[(a, i)] - gm[(a, i)]) / (2.0 * h), epsilon = 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn infinity_harmonic_entries_have_zero_residual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for n in NAMES {
            let f = get(n).unwrap();
            if !f.facts.infinity_harmonic {
                continue;
            }
            for _ in 0..100 {
                let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if f.singular_distance(&x) < 0.05 {
                    continue;
                }
                let d = Derivatives {
                    grad: f.gradient(&x).unwrap(),
                    hess: (0..f.components).map(|a| f.hessian(&x, a).unwrap()).collect(),
                };
                let r = system_from(&d, None).unwrap();
                assert!(r.iter().all(|v| v.abs() <= 1e-12), "{n} at {x:?}: {r:?}");
            }
        }
    }

    #[test]
    fn eikonal_levels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in ["affine", "cone", "distance-to-set"] {
            let f = get(n).unwrap();
            let c = f.facts.eikonal_level.unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if f.singular_distance(&x) < 1e-3 {
                    continue;
                }
                assert_abs_diff_eq!(f.gradient(&x).unwrap().norm(), c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn distance_singular_set() {
        let f = get("distance-to-set").unwrap();
        assert_abs_diff_eq!(f.singular_distance(&[0.0, 0.7]), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.singular_distance(&[0.5, 0.0]), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.singular_distance(&[0.3, 0.0]), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(f.singular_distance(&[0.8, 0.0]), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn sampled_field_uses_closures() {
        let d = GridDomain::cube(-1.0, 1.0, 0.1, 2).unwrap();
        let u = get("complex-exp").unwrap().sample(&d).unwrap();
        let i = d.index_of(&[3, 12]);
        assert!(u.uses_analytic());
        assert_eq!(u.gradient(i).unwrap(), complex_exp().gradient(&d.point(i)).unwrap());
        assert!(get("one-d-pair").unwrap().sample(&d).is_err());
    }
}
