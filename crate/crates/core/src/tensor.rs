//! Small dense matrix algebra for gradients `Du(x)` and test matrices.
//!
//! Everything here works on `N×n` matrices with `N, n` in the single digits,
//! so each call runs a full SVD without any caching.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A real `N×n` matrix: a gradient `Du(x)` (rows are components, columns are
/// partial derivatives) or a test matrix `P`.
pub type Mat = DMatrix<f64>;

/// Checks that every entry is finite and both dimensions are positive.
pub fn ensure_finite(m: &Mat) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidInput("matrix with a zero dimension".into()));
    }
    if let Some(v) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite matrix entry {v}")));
    }
    Ok(())
}

/// `ξ ⊗ η`, the `len(ξ)×len(η)` matrix with entries `ξ_α η_i`.
pub fn outer(xi: &[f64], eta: &[f64]) -> Mat {
    DMatrix::from_fn(xi.len(), eta.len(), |a, i| xi[a] * eta[i])
}

/// Frobenius norm `(Σ P²_{αi})^{1/2}`.
pub fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    ensure_finite(m)?;
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// The default rank threshold `max(N,n)·ε_mach·σ_max`.
pub fn default_rank_tol(m: &Mat) -> Result<f64> {
    let s = singular_values(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    Ok(m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax)
}

/// Number of singular values strictly above `tol` (or the default threshold).
pub fn rank(m: &Mat, tol: Option<f64>) -> Result<usize> {
    let s = singular_values(m)?;
    let tol = resolve_tol(m, &s, tol)?;
    Ok(s.iter().filter(|&&v| v > tol).count())
}

/// Smallest singular value that still counts towards the rank, if any.
///
/// Used to flag points sitting close to a rank change.
pub fn smallest_retained_singular_value(m: &Mat, tol: Option<f64>) -> Result<Option<f64>> {
    let s = singular_values(m)?;
    let tol = resolve_tol(m, &s, tol)?;
    Ok(s.iter().copied().rfind(|&v| v > tol))
}

fn resolve_tol(m: &Mat, s: &[f64], tol: Option<f64>) -> Result<f64> {
    match tol {
        Some(t) if t < 0.0 || !t.is_finite() => {
            Err(Error::InvalidInput(format!("rank tolerance must be finite and ≥ 0, got {t}")))
        }
        Some(t) => Ok(t),
        None => Ok(m.nrows().max(m.ncols()) as f64 * f64::EPSILON * s.first().copied().unwrap_or(0.0)),
    }
}

/// Orthogonal projection onto the orthogonal complement of the column space
/// of `m`, an `N×N` matrix.
///
/// Built as `I − U_r U_rᵀ` from the left singular vectors whose singular
/// values exceed the threshold, then symmetrised.
pub fn range_perp_projection(m: &Mat, tol: Option<f64>) -> Result<Mat> {
    ensure_finite(m)?;
    let n_rows = m.nrows();
    let svd = m.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::InvalidInput("SVD failed to produce left vectors".into()))?;
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut sorted = s.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tol = resolve_tol(m, &sorted, tol)?;

    let mut proj = DMatrix::<f64>::identity(n_rows, n_rows);
    for (k, &sigma) in s.iter().enumerate() {
        if sigma > tol {
            let col = u.column(k);
            proj -= col * col.transpose();
        }
    }
    Ok((&proj + proj.transpose()) * 0.5)
}

/// The pair `[ξ]⊤ = ξ⊗ξ`, `[ξ]⊥ = I − ξ⊗ξ` for a direction `ξ`.
#[derive(Clone, Debug)]
pub struct ProjectionPair {
    pub top: Mat,
    pub perp: Mat,
    /// The unit vector actually used.
    pub direction: DVector<f64>,
    /// `Some(‖ξ‖)` when the input was not unit length and had to be rescaled.
    pub rescaled_from: Option<f64>,
}

impl ProjectionPair {
    /// Applies `[ξ]⊥` to a vector.
    pub fn perp_apply(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        (&self.perp * v).iter().copied().collect()
    }
}

/// Projections onto `span[ξ]` and its orthogonal hyperplane.
///
/// A direction that is off unit length by more than `1e-12` is normalised and
/// the original norm recorded in [`ProjectionPair::rescaled_from`].
pub fn dir_projections(xi: &[f64]) -> Result<ProjectionPair> {
    if xi.is_empty() || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("direction must be a non-empty finite vector".into()));
    }
    let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidInput("direction ξ = 0".into()));
    }
    let (unit, rescaled_from) = if (norm - 1.0).abs() <= 1e-12 {
        (xi.to_vec(), None)
    } else {
        (xi.iter().map(|v| v / norm).collect(), Some(norm))
    };
    let top = outer(&unit, &unit);
    let perp = DMatrix::<f64>::identity(unit.len(), unit.len()) - &top;
    Ok(ProjectionPair {
        top,
        perp,
        direction: DVector::from_vec(unit),
        rescaled_from,
    })
}

/// Normalises `xi`, failing on the zero vector.
pub fn unit_vector(xi: &[f64]) -> Result<Vec<f64>> {
    Ok(dir_projections(xi)?.direction.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        gaussian(rng, n, n).qr().q()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&Mat::zeros(2, 2), Some(0.3)).unwrap(), 0);
        assert_eq!(rank(&Mat::zeros(2, 2), None).unwrap(), 0);
        assert_eq!(rank(&outer(&[1.0, 0.0], &[3.0, 4.0]), None).unwrap(), 1);
        assert_eq!(rank(&Mat::identity(3, 3), None).unwrap(), 3);
    }

    #[test]
    fn rank_rejects_nan() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(rank(&m, None), Err(Error::InvalidInput(_))));
        assert!(matches!(range_perp_projection(&m, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn perp_projection_examples() {
        assert_abs_diff_eq!(range_perp_projection(&Mat::zeros(2, 2), None).unwrap(), Mat::identity(2, 2));

        let q = Mat::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert_abs_diff_eq!(range_perp_projection(&q, None).unwrap(), Mat::zeros(2, 2), epsilon = 1e-14);

        // Gram-Schmidt on the single column (0.6, 0.8) gives I − ξ⊗ξ.
        let m = outer(&[0.6, 0.8], &[1.0, 0.0]);
        let expected = Mat::from_row_slice(2, 2, &[0.64, -0.48, -0.48, 0.36]);
        assert_abs_diff_eq!(range_perp_projection(&m, None).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn dir_projection_examples() {
        let p = dir_projections(&[1.0, 0.0]).unwrap();
        assert_eq!(p.top, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(p.perp, Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert!(p.rescaled_from.is_none());

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let p = dir_projections(&[s, s]).unwrap();
        assert_abs_diff_eq!(p.top, Mat::from_element(2, 2, 0.5), epsilon = 1e-15);

        let p = dir_projections(&[3.0, 4.0]).unwrap();
        assert_eq!(p.rescaled_from, Some(5.0));
        assert_abs_diff_eq!(p.direction[0], 0.6, epsilon = 1e-15);

        assert!(dir_projections(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn rank_of_outer_products_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let nr = rng.random_range(1..=5);
            let nc = rng.random_range(1..=5);
            let xi: Vec<f64> = (0..nr).map(|_| rng.sample(StandardNormal)).collect();
            let eta: Vec<f64> = (0..nc).map(|_| rng.sample(StandardNormal)).collect();
            assert_eq!(rank(&outer(&xi, &eta), None).unwrap(), 1);
        }
    }

    #[test]
    fn rank_is_orthogonally_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000 {
            let nr = rng.random_range(2..=5);
            let nc = rng.random_range(2..=5);
            let r = rng.random_range(0..=nr.min(nc));
            let mut m = Mat::zeros(nr, nc);
            for _ in 0..r {
                m += gaussian(&mut rng, nr, 1) * gaussian(&mut rng, 1, nc);
            }
            let expected = rank(&m, Some(1e-9)).unwrap();
            let rotated = random_orthogonal(&mut rng, nr) * &m * random_orthogonal(&mut rng, nc);
            assert_eq!(rank(&rotated, Some(1e-9)).unwrap(), expected);
            assert_eq!(expected, r);
        }
    }

    proptest! {
        #[test]
        fn perp_projection_annihilates_range(
            nr in 1usize..5, nc in 1usize..5, seed in any::<u64>(), r in 0usize..5
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mat::zeros(nr, nc);
            for _ in 0..r.min(nr.min(nc)) {
                m += gaussian(&mut rng, nr, 1) * gaussian(&mut rng, 1, nc);
            }
            let p = range_perp_projection(&m, None).unwrap();
            let scale = 1.0 + frobenius(&m);
            prop_assert!(frobenius(&(&p * &m)) <= 1e-10 * scale);
            prop_assert!(frobenius(&(&p * &p - &p)) <= 1e-12 * (1.0 + frobenius(&p)));
            prop_assert!(frobenius(&(&p - p.transpose())) <= 1e-12);
            let trace = p.trace();
            let expected = (nr - rank(&m, None).unwrap()) as f64;
            prop_assert!((trace - expected).abs() <= 1e-10);
        }

        #[test]
        fn projection_pair_invariants(xi in proptest::collection::vec(-3.0f64..3.0, 1..6)) {
            prop_assume!(xi.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let p = dir_projections(&xi).unwrap();
            let n = xi.len();
            let id = Mat::identity(n, n);
            prop_assert!(frobenius(&(&p.top + &p.perp - &id)) <= 1e-15);
            prop_assert!(frobenius(&(&p.top * &p.perp)) <= 1e-12);
            prop_assert!(frobenius(&(&p.top * &p.top - &p.top)) <= 1e-12 * frobenius(&p.top));
            prop_assert!(frobenius(&(&p.perp * &p.perp - &p.perp)) <= 1e-12 * frobenius(&p.perp).max(1.0));
        }
    }
}
