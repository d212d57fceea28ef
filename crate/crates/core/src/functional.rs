//! The supremal functional `E∞`, the integral functional, the local
//! functional and the extremum-ball family of a bump.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ball_mask, ess_sup_by, interior_extrema, ExtremumKind, GridDomain, GridField, SubdomainMask};
use crate::hamiltonian::Hamiltonian;

fn check_dims(h: &Hamiltonian, u: &GridField) -> Result<()> {
    if h.components() != u.components() || h.dim() != u.domain().dim() {
        return Err(Error::DimensionMismatch(format!(
            "H acts on ℝ^{{{}×{}}} but the field has N={}, n={}",
            h.components(),
            h.dim(),
            u.components(),
            u.domain().dim()
        )));
    }
    Ok(())
}

/// `E∞(u, mask)` together with where the maximum sits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupValue {
    #[serde(rename = "e_infty")]
    pub value: f64,
    #[serde(rename = "mask")]
    pub mask_label: String,
    pub argmax_point: Vec<f64>,
    #[serde(skip)]
    pub argmax: usize,
}

/// `max over the mask of H(x, Du(x))`.
pub fn e_infty(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask) -> Result<SupValue> {
    check_dims(h, u)?;
    let domain = u.domain();
    let (value, argmax) = ess_sup_by(mask, |i| h.eval(&domain.point(i), &u.gradient(i)?))?;
    Ok(SupValue {
        value,
        mask_label: mask.label().to_string(),
        argmax_point: domain.point(argmax),
        argmax,
    })
}

/// Midpoint-rule `∫ H(x, Du) dx` over the mask, summed in index order.
pub fn e_integral(h: &Hamiltonian, u: &GridField, mask: &SubdomainMask) -> Result<f64> {
    check_dims(h, u)?;
    let domain = u.domain();
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::InvalidInput("integral over an empty mask".into()));
    }
    let vals: Vec<f64> = idx
        .par_iter()
        .map(|&i| h.eval(&domain.point(i), &u.gradient(i)?))
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() * domain.cell_volume())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalFunctional {
    pub center: Vec<f64>,
    pub rhos: Vec<f64>,
    pub values: Vec<f64>,
    /// Linear extrapolation of the last two terms to `ρ = 0`. An estimate,
    /// not a computed value.
    pub extrapolated_limit: Option<f64>,
}

/// `E∞` over the balls `B_ρ(x)` for a decreasing sequence of radii.
pub fn local_functional(
    h: &Hamiltonian,
    u: &GridField,
    parent: &SubdomainMask,
    center: &[f64],
    rhos: &[f64],
) -> Result<LocalFunctional> {
    check_dims(h, u)?;
    let domain = u.domain();
    if rhos.is_empty() || rhos.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("radii must be strictly decreasing".into()));
    }
    let smallest = rhos[rhos.len() - 1];
    if smallest < 3.0 * domain.h() * (1.0 - 1e-12) {
        return Err(Error::Resolution(format!(
            "smallest radius {smallest} is below 3h = {}",
            3.0 * domain.h()
        )));
    }
    let values = rhos
        .iter()
        .map(|&rho| {
            let ball = ball_mask(domain, parent, center, rho)?;
            Ok(e_infty(h, u, &ball)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    if let Some(w) = values.windows(2).find(|w| w[1] > w[0] + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "local functional increased from {} to {} as the ball shrank",
            w[0], w[1]
        )));
    }
    let extrapolated_limit = match (rhos, values.as_slice()) {
        ([.., r1, r2], [.., v1, v2]) => Some((r1 * v2 - r2 * v1) / (r1 - r2)),
        _ => None,
    };
    Ok(LocalFunctional { center: center.to_vec(), rhos: rhos.to_vec(), values, extrapolated_limit })
}

/// Which radii to use for each extremum ball.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadiusPolicy {
    /// Upper bound on the maximal radius.
    pub cap: Option<f64>,
    /// Fractions of the maximal radius evaluated per centre.
    pub fractions: Vec<f64>,
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        Self { cap: None, fractions: vec![1.0, 0.5] }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Ball {
    pub center: Vec<f64>,
    #[serde(skip)]
    pub center_index: usize,
    pub kind: ExtremumKind,
    /// The largest admissible radius, a multiple of `h`.
    pub radius: f64,
    /// Radii actually used, one mask per entry.
    pub radii: Vec<f64>,
    #[serde(skip)]
    pub masks: Vec<SubdomainMask>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BallFamily {
    pub parent: String,
    pub balls: Vec<Ball>,
}

impl BallFamily {
    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }
}

fn quantize(rho: f64, h: f64) -> f64 {
    ((rho / h) + 1e-9).floor() * h
}

/// Extremum balls of `phi` inside `mask`: one per interior extremum, each with
/// the largest `h`-multiple radius whose ball is compactly inside the mask.
pub fn ball_family(phi: &GridField, mask: &SubdomainMask, policy: &RadiusPolicy) -> Result<BallFamily> {
    if phi.components() != 1 {
        return Err(Error::DimensionMismatch("ball family needs a scalar φ".into()));
    }
    if policy.fractions.is_empty() || policy.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidInput("radius fractions must lie in (0, 1]".into()));
    }
    let domain = phi.domain();
    if let Some(&i) = mask.frontier(domain).iter().find(|&&i| phi.value(i, 0).abs() > 1e-12) {
        return Err(Error::BoundaryCondition(format!(
            "φ = {} at boundary point {:?}",
            phi.value(i, 0),
            domain.point(i)
        )));
    }
    let depth = mask.distance_to_complement(domain);
    let h = domain.h();
    let mut balls = Vec::new();
    for ext in interior_extrema(phi, mask) {
        let mut rho = quantize(depth[ext.index], h);
        if let Some(cap) = policy.cap {
            rho = rho.min(quantize(cap, h));
        }
        let found = loop {
            match ball_mask(domain, mask, &ext.point, rho) {
                Ok(_) => break Some(rho),
                Err(Error::Containment(_)) if rho > 0.0 => rho = quantize(rho - h, h).max(0.0),
                Err(Error::Containment(_)) => break None,
                Err(e) => return Err(e),
            }
        };
        let Some(radius) = found else { continue };
        let mut radii: Vec<f64> = policy.fractions.iter().map(|f| quantize(f * radius, h)).collect();
        radii.dedup();
        let masks = radii
            .iter()
            .map(|&r| {
                ball_mask(domain, mask, &ext.point, r).map(|m| m.with_label(format!("ball({:?}, {r})", ext.point)))
            })
            .collect::<Result<Vec<_>>>()?;
        balls.push(Ball { center: ext.point, center_index: ext.index, kind: ext.kind, radius, radii, masks });
    }
    if balls.is_empty() {
        return Err(Error::Containment("no extremum of φ admits a ball inside the mask".into()));
    }
    Ok(BallFamily { parent: mask.label().to_string(), balls })
}

/// The largest ball radius (a multiple of `h`) about `center` inside `mask`.
pub fn maximal_radius(domain: &GridDomain, mask: &SubdomainMask, center: &[f64]) -> Option<f64> {
    let idx = domain.nearest_index(center)?;
    let mut rho = quantize(mask.distance_to_complement(domain)[idx], domain.h());
    loop {
        if ball_mask(domain, mask, center, rho).is_ok() {
            return Some(rho);
        }
        if rho <= 0.0 {
            return None;
        }
        rho = quantize(rho - domain.h(), domain.h()).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn affine(domain: &GridDomain, a: [f64; 2], b: f64) -> GridField {
        GridField::scalar_from_fn(domain.clone(), |x| a[0] * x[0] + a[1] * x[1] + b).unwrap()
    }

    #[test]
    fn affine_sup_is_slope_norm() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let u = affine(&d, [0.6, 0.8], 0.3);
        for mask in [
            SubdomainMask::interior(&d, 1),
            SubdomainMask::from_predicate(&d, 1, "test", |x| (x[0] - 0.5).hypot(x[1] - 0.5) < 0.2).unwrap(),
        ] {
            assert_abs_diff_eq!(e_infty(&h, &u, &mask).unwrap().value, 1.0, epsilon = 1e-12);
        }
        let c = GridField::scalar_from_fn(d.clone(), |_| 2.0).unwrap();
        assert_eq!(e_infty(&h, &c, &SubdomainMask::interior(&d, 1)).unwrap().value, 0.0);
    }

    #[test]
    fn constant_shift_is_exact() {
        let d = GridDomain::cube(0.0, 1.0, 0.05, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let u = GridField::scalar_from_fn(d.clone(), |x| (3.0 * x[0]).sin() * x[1]).unwrap();
        let v = GridField::scalar_from_fn(d.clone(), |x| (3.0 * x[0]).sin() * x[1] + 0.5).unwrap();
        let (a, b) = (e_infty(&h, &u, &m).unwrap(), e_infty(&h, &v, &m).unwrap());
        assert!((a.value - b.value).abs() <= 1e-12);
    }

    #[test]
    fn cone_on_annulus() {
        let d = GridDomain::cube(-1.0, 1.0, 0.01, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let u = GridField::scalar_from_fn(d.clone(), |x| x[0].hypot(x[1])).unwrap();
        let m = SubdomainMask::from_predicate(&d, 1, "test", |x| {
            let r = x[0].hypot(x[1]);
            (0.2..=0.9).contains(&r)
        }).unwrap();
        assert_abs_diff_eq!(e_infty(&h, &u, &m).unwrap().value, 1.0, epsilon = 2e-3);
    }

    #[test]
    fn sup_is_monotone_under_inclusion() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let u = GridField::scalar_from_fn(d.clone(), |x| x[0] * x[0] + (2.0 * x[1]).cos()).unwrap();
        let big = SubdomainMask::interior(&d, 1);
        let small = SubdomainMask::from_predicate(&d, 1, "test", |x| x[0] < 0.4 && x[1] > 0.3).unwrap();
        assert!(e_infty(&h, &u, &small).unwrap().value <= e_infty(&h, &u, &big).unwrap().value);
    }

    #[test]
    fn report_fragment_shape() {
        let d = GridDomain::cube(0.0, 1.0, 0.1, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let u = affine(&d, [1.0, 0.0], 0.0);
        let m = SubdomainMask::interior(&d, 1).with_label("omega");
        let json = serde_json::to_value(e_infty(&h, &u, &m).unwrap()).unwrap();
        assert_eq!(json["mask"], "omega");
        assert!(json["e_infty"].is_f64());
        assert_eq!(json["argmax_point"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn integrals() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let measure = m.count() as f64 * d.cell_volume();
        let u = affine(&d, [0.6, 0.8], 0.0);
        assert_abs_diff_eq!(e_integral(&h, &u, &m).unwrap(), measure, epsilon = 1e-10);

        // Interior points of this grid are the cell centres of [0,1]².
        let d = GridDomain::cube(-0.0025, 1.0025, 0.005, 2).unwrap();
        let sq = Hamiltonian::parse("norm(P)^2", 1, 2).unwrap();
        let u = GridField::scalar_from_fn(d.clone(), |x| x[0] * x[0] / 2.0).unwrap().with_gradient(Arc::new(|x| {
            Mat::from_row_slice(1, 2, &[x[0], 0.0])
        }));
        let v = e_integral(&sq, &u, &SubdomainMask::interior(&d, 1)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn local_functional_of_cone() {
        let d = GridDomain::cube(-1.0, 1.0, 0.01, 2).unwrap();
        let h = Hamiltonian::euclidean(1, 2).unwrap();
        let u = GridField::scalar_from_fn(d.clone(), |x| x[0].hypot(x[1])).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let lf = local_functional(&h, &u, &m, &[0.5, 0.0], &[0.2, 0.1, 0.05]).unwrap();
        assert!(lf.values.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!((lf.values[2] - 1.0).abs() < 1e-3);
        assert!(local_functional(&h, &u, &m, &[0.5, 0.0], &[0.1, 0.02]).is_err());
        assert!(local_functional(&h, &u, &m, &[0.5, 0.0], &[0.9]).is_err());

        let c = GridField::scalar_from_fn(d.clone(), |_| 1.0).unwrap();
        let lf = local_functional(&h, &c, &m, &[0.0, 0.0], &[0.3, 0.1]).unwrap();
        assert_eq!(lf.values, vec![0.0, 0.0]);
    }

    fn poly_bump(d: &GridDomain, c: [f64; 2], r: f64, a: f64) -> impl Fn(&[f64]) -> f64 + Sync {
        let _ = d;
        move |x: &[f64]| {
            let s2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (r * r);
            if s2 < 1.0 {
                a * (1.0 - s2).powi(3)
            } else {
                0.0
            }
        }
    }

    #[test]
    fn single_bump_family() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), poly_bump(&d, [0.5, 0.5], 0.3, 1.0)).unwrap();
        let fam = ball_family(&phi, &m, &RadiusPolicy::default()).unwrap();
        assert_eq!(fam.len(), 1);
        let b = &fam.balls[0];
        assert_eq!(b.kind, ExtremumKind::Max);
        assert_abs_diff_eq!(b.center[0], 0.5, epsilon = 1e-12);
        // Mask ends one cell in; the ball also needs its neighbours inside.
        assert!((b.radius - (0.5 - 2.0 * 0.02)).abs() <= 0.02 + 1e-9, "{}", b.radius);
        assert_eq!(b.masks.len(), 2);
        for mask in &b.masks {
            assert!(mask.is_subset_of(&m));
        }
    }

    #[test]
    fn two_bumps_and_zero_field() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let b1 = poly_bump(&d, [0.3, 0.3], 0.15, 1.0);
        let b2 = poly_bump(&d, [0.7, 0.6], 0.2, 0.5);
        let phi = GridField::scalar_from_fn(d.clone(), |x| b1(x) + b2(x)).unwrap();
        let fam = ball_family(&phi, &m, &RadiusPolicy::default()).unwrap();
        let maxima: Vec<_> = fam.balls.iter().filter(|b| b.kind == ExtremumKind::Max).collect();
        assert_eq!(maxima.len(), 2);
        for target in [[0.3, 0.3], [0.7, 0.6]] {
            assert!(maxima
                .iter()
                .any(|b| (b.center[0] - target[0]).hypot(b.center[1] - target[1]) <= 0.02 + 1e-12));
        }

        let zero = GridField::scalar_from_fn(d.clone(), |_| 0.0).unwrap();
        let fam = ball_family(&zero, &m, &RadiusPolicy::default()).unwrap();
        assert!(!fam.is_empty());
    }

    #[test]
    fn boundary_values_are_checked() {
        let d = GridDomain::cube(0.0, 1.0, 0.05, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), |x| x[0]).unwrap();
        assert!(matches!(ball_family(&phi, &m, &RadiusPolicy::default()), Err(Error::BoundaryCondition(_))));
    }

    #[test]
    fn radius_cap_applies() {
        let d = GridDomain::cube(0.0, 1.0, 0.02, 2).unwrap();
        let m = SubdomainMask::interior(&d, 1);
        let phi = GridField::scalar_from_fn(d.clone(), poly_bump(&d, [0.5, 0.5], 0.3, -1.0)).unwrap();
        let policy = RadiusPolicy { cap: Some(0.1), fractions: vec![1.0] };
        let fam = ball_family(&phi, &m, &policy).unwrap();
        assert_eq!(fam.balls[0].kind, ExtremumKind::Min);
        assert_abs_diff_eq!(fam.balls[0].radius, 0.1, epsilon = 1e-12);
        let full = maximal_radius(&d, &m, &[0.5, 0.5]).unwrap();
        assert!(full > 0.4 && full < 0.5, "{full}");
    }
}
