//! Completion of the rank-`q` Gram matrix `ΛΛᵀ` from its observed blocks.
//!
//! Each marginal Gram block is factored through its top `q` eigenpairs. The
//! two factorizations agree on the shared `X` rows up to an orthogonal
//! rotation, which an orthogonal Procrustes fit recovers; rotating the B-side
//! factors into the A-side frame gives `Λ_Y Λ_Zᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen_desc};
use crate::types::PartialCovariance;

/// Relative tolerance used when the caller does not supply one.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// Marginal factors in their canonical (eigenvector) rotation.
#[derive(Debug, Clone)]
pub struct CanonicalFactors {
    /// `V_A D_A^{1/2}`, rows ordered `(X, Y)`.
    pub factors_a: DMatrix<f64>,
    /// `V_B D_B^{1/2}`, rows ordered `(X, Z)`.
    pub factors_b: DMatrix<f64>,
    pub eigenvalues_a: DVector<f64>,
    pub eigenvalues_b: DVector<f64>,
}

/// `V D^{1/2}` for the top `q` eigenpairs of a symmetric PSD matrix.
///
/// `tol` is absolute; pass `None` to use `1e-8 × largest |eigenvalue|`.
/// Eigenvalues that are negative but above `-tol` are clipped to zero.
pub fn top_q_factors(
    gram: &DMatrix<f64>,
    q: usize,
    tol: Option<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = gram.nrows();
    if !gram.is_square() {
        return Err(Error::DimensionMismatch(format!("Gram matrix is {:?}", gram.shape())));
    }
    if q == 0 || q > m {
        return Err(Error::InvalidArgument(format!("q = {q} with a {m}x{m} Gram matrix")));
    }
    let (values, vectors) = sym_eigen_desc(gram);
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = tol.unwrap_or(DEFAULT_REL_TOL * scale);
    let found = values.iter().filter(|&&v| v > tol).count();
    if found < q {
        return Err(Error::RankDeficient {
            context: "Gram matrix".into(),
            needed: q,
            found,
        });
    }
    let eig = DVector::from_fn(q, |i, _| values[i].max(0.0));
    let factors = DMatrix::from_fn(m, q, |i, j| vectors[(i, j)] * eig[j].sqrt());
    Ok((factors, eig))
}

/// Orthogonal `R` minimizing `‖target − source·R‖_F`.
///
/// With `sourceᵀ·target = W D Qᵀ` the minimizer is `R = W Qᵀ`. It is unique
/// only when `sourceᵀ·target` is nonsingular, so a singular value at or below
/// `tol` (default `1e-8 ×` the largest) is reported as `RankDeficient`.
pub fn procrustes_align(
    target: &DMatrix<f64>,
    source: &DMatrix<f64>,
    tol: Option<f64>,
) -> Result<DMatrix<f64>> {
    if target.shape() != source.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Procrustes target {:?} vs source {:?}",
            target.shape(),
            source.shape()
        )));
    }
    let q = target.ncols();
    let cross = source.transpose() * target;
    let svd = cross.svd(true, true);
    let sv = &svd.singular_values;
    let largest = sv.iter().copied().fold(0.0, f64::max);
    let tol = tol.unwrap_or(DEFAULT_REL_TOL * largest);
    let found = sv.iter().filter(|&&s| s > tol).count();
    if found < q || largest == 0.0 {
        return Err(Error::RankDeficient {
            context: "Procrustes cross-product".into(),
            needed: q,
            found,
        });
    }
    let w = svd.u.expect("requested U");
    let qt = svd.v_t.expect("requested Vᵀ");
    Ok(w * qt)
}

/// Factor both marginal Gram assemblies of `observed`.
pub fn canonical_factors(observed: &PartialCovariance, q: usize) -> Result<CanonicalFactors> {
    let (factors_a, eigenvalues_a) = top_q_factors(&observed.marginal_a(), q, None)?;
    let (factors_b, eigenvalues_b) = top_q_factors(&observed.marginal_b(), q, None)?;
    Ok(CanonicalFactors { factors_a, factors_b, eigenvalues_a, eigenvalues_b })
}

/// Recover `Λ_Y Λ_Zᵀ` from canonical marginal factors.
pub fn complete_from_factors(factors: &CanonicalFactors, p_x: usize) -> Result<DMatrix<f64>> {
    let fa = &factors.factors_a;
    let fb = &factors.factors_b;
    let q = fa.ncols();
    let lx_a = fa.rows(0, p_x).into_owned();
    let lx_b = fb.rows(0, p_x).into_owned();
    let ly_a = fa.rows(p_x, fa.nrows() - p_x);
    let lz_b = fb.rows(p_x, fb.nrows() - p_x);
    if p_x < q {
        return Err(Error::RankDeficient {
            context: "shared-variable loadings".into(),
            needed: q,
            found: p_x,
        });
    }
    let r = procrustes_align(&lx_a, &lx_b, None)?;
    Ok(ly_a * (lz_b * r).transpose())
}

/// Complete the unobserved `Y × Z` block of a rank-`q` Gram matrix.
///
/// `observed` holds Gram blocks (covariance minus uniquenesses); its `yz`
/// field is ignored.
pub fn complete_gram(observed: &PartialCovariance, q: usize) -> Result<DMatrix<f64>> {
    let factors = canonical_factors(observed, q)?;
    complete_from_factors(&factors, observed.partition.p_x)
}

/// Symmetric PSD check used by callers that want to validate inputs first.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    linalg::is_symmetric(m, 1e-10) && linalg::min_eigenvalue(m) >= -tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::types::{FactorModel, PartitionSpec};

    fn gram_from(lambda: &DMatrix<f64>, part: &PartitionSpec) -> PartialCovariance {
        let m = FactorModel::new(part.clone(), lambda.clone(), DVector::zeros(part.p())).unwrap();
        let mut pc = m.implied_covariance();
        pc.yz = None;
        pc
    }

    fn random_orthogonal(q: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 9);
        let g = rng::normal_matrix(&mut r, q, q, 0.0, 1.0);
        g.qr().q()
    }

    #[test]
    fn rank_one_factor() {
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let (f, e) = top_q_factors(&(&v * v.transpose()), 1, None).unwrap();
        assert!((e[0] - 5.0).abs() < 1e-12);
        let sign = f[(0, 0)].signum();
        assert!((f[(0, 0)] * sign - 1.0).abs() < 1e-12);
        assert!((f[(1, 0)] * sign - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_factors_reconstruct() {
        let (f, e) = top_q_factors(&DMatrix::identity(3, 3), 3, None).unwrap();
        assert!((&f * f.transpose() - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(e.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_gram_reconstruction() {
        let mut r = rng::stream(5, 0);
        let l = rng::normal_matrix(&mut r, 8, 3, 0.0, 1.0);
        let g = &l * l.transpose();
        let (f, e) = top_q_factors(&g, 3, None).unwrap();
        assert!((&f * f.transpose() - &g).norm() < 1e-10);
        assert!(e[0] >= e[1] && e[1] >= e[2]);
        assert!(matches!(top_q_factors(&g, 4, None), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn procrustes_reflection() {
        let target = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let source = DMatrix::from_column_slice(2, 1, &[-1.0, 0.0]);
        let r = procrustes_align(&target, &source, None).unwrap();
        assert!((r[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        for seed in 0..10 {
            let mut r = rng::stream(seed, 1);
            let target = rng::normal_matrix(&mut r, 6, 3, 0.0, 1.0);
            let r0 = random_orthogonal(3, seed);
            let source = &target * r0.transpose();
            let got = procrustes_align(&target, &source, None).unwrap();
            assert!((&got - &r0).amax() < 1e-10);
            assert!((got.transpose() * &got - DMatrix::identity(3, 3)).norm() < 1e-12);
            assert!((got.determinant().abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn procrustes_matches_angle_grid() {
        // Brute force over rotations and reflections in 2D.
        let objective = |t: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>| (t - s * r).norm_squared();
        for seed in 0..5 {
            let mut g = rng::stream(seed, 2);
            let target = rng::normal_matrix(&mut g, 5, 2, 0.0, 1.0);
            let source = rng::normal_matrix(&mut g, 5, 2, 0.0, 1.0);
            let r = procrustes_align(&target, &source, None).unwrap();
            let best = objective(&target, &source, &r);
            let mut grid_best = f64::INFINITY;
            let steps = 20_000;
            for k in 0..steps {
                let a = 2.0 * std::f64::consts::PI * k as f64 / steps as f64;
                let (c, s) = (a.cos(), a.sin());
                let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                let refl = DMatrix::from_row_slice(2, 2, &[c, s, s, -c]);
                grid_best = grid_best.min(objective(&target, &source, &rot));
                grid_best = grid_best.min(objective(&target, &source, &refl));
            }
            assert!(best <= grid_best + 1e-12);
            assert!(grid_best - best < 1e-4 * (1.0 + best));
        }
    }

    #[test]
    fn procrustes_rejects_singular_cross_product() {
        let target = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let source = DMatrix::identity(2, 2);
        assert!(matches!(
            procrustes_align(&target, &source, None),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn scalar_completion() {
        let part = PartitionSpec::new(1, 1, 1).unwrap();
        let l = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let got = complete_gram(&gram_from(&l, &part), 1).unwrap();
        assert!((got[(0, 0)] - 6.0).abs() < 1e-12);
        let neg = DMatrix::from_column_slice(3, 1, &[-1.0, 2.0, -3.0]);
        let got = complete_gram(&gram_from(&neg, &part), 1).unwrap();
        assert!((got[(0, 0)] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_y_loadings_complete_to_zero() {
        let part = PartitionSpec::new(2, 2, 2).unwrap();
        let mut r = rng::stream(1, 0);
        let mut l = rng::normal_matrix(&mut r, 6, 1, 0.0, 1.0);
        l[(2, 0)] = 0.0;
        l[(3, 0)] = 0.0;
        // A-side Gram then has rank 1 from the X rows only.
        let got = complete_gram(&gram_from(&l, &part), 1).unwrap();
        assert!(got.amax() < 1e-12);
    }

    #[test]
    fn random_completion_is_exact() {
        let part = PartitionSpec::new(4, 3, 5).unwrap();
        let mut r = rng::stream(77, 0);
        let l = rng::normal_matrix(&mut r, 12, 2, 0.0, 1.0);
        let m = FactorModel::new(part.clone(), l.clone(), DVector::zeros(12)).unwrap();
        let got = complete_gram(&gram_from(&l, &part), 2).unwrap();
        assert!((got - m.sigma_yz()).norm() < 1e-9);
    }

    #[test]
    fn rerotated_factors_give_same_completion() {
        let part = PartitionSpec::new(3, 2, 3).unwrap();
        let mut r = rng::stream(8, 0);
        let l = rng::normal_matrix(&mut r, 8, 2, 0.0, 1.0);
        let mut f = canonical_factors(&gram_from(&l, &part), 2).unwrap();
        let base = complete_from_factors(&f, 3).unwrap();
        f.factors_a = &f.factors_a * random_orthogonal(2, 1);
        f.factors_b = &f.factors_b * random_orthogonal(2, 2);
        let rot = complete_from_factors(&f, 3).unwrap();
        assert!((base - rot).norm() < 1e-9);
    }

    #[test]
    fn rank_deficient_shared_block_errors() {
        let part = PartitionSpec::new(2, 2, 2).unwrap();
        let mut r = rng::stream(4, 0);
        let mut l = rng::normal_matrix(&mut r, 6, 2, 0.0, 1.0);
        // Λ_X of rank 1.
        l[(1, 0)] = 2.0 * l[(0, 0)];
        l[(1, 1)] = 2.0 * l[(0, 1)];
        assert!(complete_gram(&gram_from(&l, &part), 2).is_err());
    }
}
